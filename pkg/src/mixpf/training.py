"""Alternating conditional training of the transition and proposal
mixture networks against the filter's sum-of-log-weights objective.

Layout of one full fit:
  1. random init of both parameter sets;
  2. bootstrap warm-up of the transition net (it serves as both transition
     and proposal, so the weights reduce to the observation likelihood);
  3. A alternating iterations: refit the proposal conditional on the
     current transition, then refit the transition conditional on the
     *new* proposal.
Each conditional update sweeps J optimiser steps over each of B
telescoping observation prefixes y_{1:ceil(bT/B)}; a fresh ADAM state is
created per conditional update and persists across its batches.

The static parameter set is never touched: updates are functional and the
gradient step only ever consumes the learned set's leaves.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import filtering as pf
from . import networks as nets
from .streams import substream


@dataclass
class TrainConfig:
    """Hyperparameters for one fit; defaults follow the benchmark protocol."""

    B: int
    J: int = 50
    A: int = 20
    K: int = 100
    learning_rate: float = 3e-3
    S_f: int = 1
    S_pi: int = 1
    hidden: tuple = (64, 64)
    clip_norm: float = 10.0
    sampler: str = "categorical"       # or "gumbel"
    temperature: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("B", "J", "A", "K"):
            if getattr(self, name) < (0 if name == "A" else 1):
                raise ValueError(f"{name} must be >= 1 (A may be 0), got {getattr(self, name)}")

    def as_dict(self) -> dict:
        return {
            "B": self.B, "J": self.J, "A": self.A, "K": self.K,
            "learning_rate": self.learning_rate, "S_f": self.S_f,
            "S_pi": self.S_pi, "hidden": list(self.hidden),
            "clip_norm": self.clip_norm, "sampler": self.sampler,
            "temperature": self.temperature, "seed": self.seed,
        }


@dataclass
class LearnedModel:
    """Fitted parameter sets plus the full optimisation history."""

    proposal: nets.NetworkParams
    transition: nets.NetworkParams | None
    S_pi: int
    S_f: int | None
    d_x: int
    d_y: int
    config: dict
    history: list = field(default_factory=list)


def batch_prefix_length(b: int, B: int, T: int) -> int:
    """Telescoping batch rule: batch b covers y_{1:ceil(bT/B)}."""
    return int(np.ceil(b * T / B))


def _build_models(role, lifted_learn, static, cfg: TrainConfig, model):
    """Wire the learned/static parameter sets into filter-facing objects.

    role: 'warmup' (learned transition net plays both distributions),
    'prop' (learn proposal, condition on static transition net or, when
    static is a state-space model, on the true kernel), or 'trans'
    (learn transition, condition on static proposal net).
    """
    d_x = model.d_x
    periodic = model.periodic
    if role == "warmup":
        head = pf.LearnedMixtureModel(
            lifted_learn, cfg.S_f, d_x, uses_observation=False,
            sampler=cfg.sampler, temperature=cfg.temperature, periodic=periodic,
        )
        return head, head
    if role == "prop":
        proposal = pf.LearnedMixtureModel(
            lifted_learn, cfg.S_pi, d_x, uses_observation=True,
            sampler=cfg.sampler, temperature=cfg.temperature, periodic=periodic,
        )
        if isinstance(static, nets.TapeParams):
            transition = pf.LearnedMixtureModel(
                static, cfg.S_f, d_x, uses_observation=False,
                sampler=cfg.sampler, temperature=cfg.temperature, periodic=periodic,
            )
        else:
            transition = pf.TrueKernelModel(static)
        return transition, proposal
    if role == "trans":
        transition = pf.LearnedMixtureModel(
            lifted_learn, cfg.S_f, d_x, uses_observation=False,
            sampler=cfg.sampler, temperature=cfg.temperature, periodic=periodic,
        )
        proposal = pf.LearnedMixtureModel(
            static, cfg.S_pi, d_x, uses_observation=True,
            sampler=cfg.sampler, temperature=cfg.temperature, periodic=periodic,
        )
        return transition, proposal
    raise ValueError(f"unknown role {role!r}")


def update_step(theta_learn, theta_static, role, ys, model, init_sampler,
                cfg: TrainConfig, adam: nets.AdamState, rng) -> tuple:
    """One filter run + one ADAM ascent step on the learned parameters.

    Returns (new params, info dict).  theta_static is read-only; only the
    learned set's leaf gradients are ever extracted from the tape.
    """
    tape = ad.Tape()
    lifted = nets.lift_params(tape, theta_learn)
    static = (
        nets.lift_params(tape, theta_static)
        if isinstance(theta_static, nets.NetworkParams)
        else theta_static
    )
    transition, proposal = _build_models(role, lifted, static, cfg, model)
    result = pf.run_filter(
        transition=transition, proposal=proposal,
        observation_logpdf=pf.make_observation_logpdf(model),
        ys=ys, K=cfg.K, rng=rng, init_sampler=init_sampler,
        differentiable=True, tape=tape,
    )
    grads = ad.backward(result.objective)
    # ascent on the objective = descent on its negation
    gs = [-grads.wrt(leaf) for leaf in lifted.leaf_arrays()]
    gs, norm, clipped = nets.clip_global_norm(gs, cfg.clip_norm)
    new_params = nets.adam_step(adam, theta_learn, gs)
    info = {"objective": result.objective_value, "grad_norm": norm, "clipped": clipped}
    return new_params, info


def conditional_update(B, J, theta_0, theta_static, ys, *, role, model,
                       init_sampler, cfg: TrainConfig, iteration: int,
                       history: list) -> nets.NetworkParams:
    """J ADAM steps on each of B nested observation prefixes.

    A degenerate filter run is retried once on a fresh substream, then
    surfaced.  ADAM moments persist across batches within this call and
    are reset between calls.
    """
    T = len(ys)
    if B > T:
        raise ValueError(f"B={B} exceeds series length T={T}")
    theta = theta_0
    adam = nets.adam_init(theta_0, cfg.learning_rate)
    for b in range(1, B + 1):
        y_b = ys[: batch_prefix_length(b, B, T)]
        for j in range(1, J + 1):
            t0 = time.perf_counter()
            rng = substream(cfg.seed, role, iteration, b, j)
            try:
                theta, info = update_step(
                    theta, theta_static, role, y_b, model, init_sampler, cfg, adam, rng,
                )
            except pf.DegeneracyError:
                retry = substream(cfg.seed, role, iteration, b, j, "retry")
                theta, info = update_step(
                    theta, theta_static, role, y_b, model, init_sampler, cfg, adam, retry,
                )
                info["retried"] = True
            info.update(
                phase=role, a=iteration, b=b, j=j,
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
            history.append(info)
    return theta


def _checkpoint(out_dir, tag, learned_pi, learned_f, cfg, model):
    if out_dir is None:
        return
    from pathlib import Path

    path = Path(out_dir) / f"checkpoint_{tag}.json"
    nets.save_checkpoint(
        path,
        proposal=learned_pi, proposal_S=cfg.S_pi,
        transition=learned_f, transition_S=cfg.S_f if learned_f is not None else None,
        d_x=model.d_x, d_y=model.d_y, extra={"tag": tag, "config": cfg.as_dict()},
    )


def fit_transition_and_proposal(ys, model, x0, cfg: TrainConfig,
                                out_dir=None) -> LearnedModel:
    """Learn both mixture networks from one observation series.

    Total filter runs: B*J (warm-up) + 2*A*B*J (alternation).
    """
    d_x, d_y = model.d_x, model.d_y
    init_sampler = pf.gaussian_init_sampler(x0, model.transition_scale())
    theta_pi = nets.init_params(
        [d_x + d_y, *cfg.hidden, 2 * cfg.S_pi * d_x], substream(cfg.seed, "init-pi")
    )
    theta_f = nets.init_params(
        [d_x, *cfg.hidden, 2 * cfg.S_f * d_x], substream(cfg.seed, "init-f")
    )
    history: list = []
    theta_f = conditional_update(
        cfg.B, cfg.J, theta_f, theta_f, ys, role="warmup", model=model,
        init_sampler=init_sampler, cfg=cfg, iteration=0, history=history,
    )
    _checkpoint(out_dir, "warmup", theta_pi, theta_f, cfg, model)
    for a in range(1, cfg.A + 1):
        theta_pi = conditional_update(
            cfg.B, cfg.J, theta_pi, theta_f, ys, role="prop", model=model,
            init_sampler=init_sampler, cfg=cfg, iteration=a, history=history,
        )
        theta_f = conditional_update(
            cfg.B, cfg.J, theta_f, theta_pi, ys, role="trans", model=model,
            init_sampler=init_sampler, cfg=cfg, iteration=a, history=history,
        )
        _checkpoint(out_dir, f"iter{a:03d}", theta_pi, theta_f, cfg, model)
    return LearnedModel(
        proposal=theta_pi, transition=theta_f, S_pi=cfg.S_pi, S_f=cfg.S_f,
        d_x=d_x, d_y=d_y, config=cfg.as_dict(), history=history,
    )


def fit_proposal_only(ys, model, x0, cfg: TrainConfig, out_dir=None) -> LearnedModel:
    """Restricted mode: the true transition kernel is known and only the
    proposal network is learned (conditioned on it throughout)."""
    d_x, d_y = model.d_x, model.d_y
    init_sampler = pf.gaussian_init_sampler(x0, model.transition_scale())
    theta_pi = nets.init_params(
        [d_x + d_y, *cfg.hidden, 2 * cfg.S_pi * d_x], substream(cfg.seed, "init-pi")
    )
    history: list = []
    for a in range(1, cfg.A + 1):
        theta_pi = conditional_update(
            cfg.B, cfg.J, theta_pi, model, ys, role="prop", model=model,
            init_sampler=init_sampler, cfg=cfg, iteration=a, history=history,
        )
        _checkpoint(out_dir, f"iter{a:03d}", theta_pi, None, cfg, model)
    return LearnedModel(
        proposal=theta_pi, transition=None, S_pi=cfg.S_pi, S_f=None,
        d_x=d_x, d_y=d_y, config=cfg.as_dict(), history=history,
    )


def save_history(history: list, path) -> None:
    """CSV export: phase, a, b, j, objective, grad_norm, clipped, wall_ms."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "a", "b", "j", "objective", "grad_norm", "clipped", "wall_ms"])
        for row in history:
            w.writerow([
                row["phase"], row["a"], row["b"], row["j"],
                repr(float(row["objective"])), repr(float(row["grad_norm"])),
                str(bool(row["clipped"])).lower(), repr(float(row["wall_ms"])),
            ])
