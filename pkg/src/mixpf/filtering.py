"""Sequential importance resampling on the tape, with stop-gradient
differentiable resampling and the sum-of-log-weights training objective.

The whole K-particle ensemble is carried as single (K, d) tape variables,
so one filter step costs a constant number of tape nodes.  With
``differentiable=False`` the resampling pre-weights are the plain 1/K
constants; with ``differentiable=True`` they carry a gradient through
w / stop_gradient(w) while keeping the exact same primal values, so both
modes produce bitwise-identical particles, weights and estimates.

Randomness is consumed in a fixed, documented order per step: K resampling
uniforms, then the proposal's own draws (component indices when S > 1,
then a (K, d_x) block of standard normals).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import networks as nets
from .autodiff import Var
from .distributions import (
    LOG_2PI,
    GaussianMixture,
    categorical_draws,
    log_density_mixture,
    sample_mixture_reparam,
    sample_mixture_stopgrad,
    wrap_residual,
)

TWO_PI = 2.0 * np.pi


class DegeneracyError(RuntimeError):
    """Raised when essentially all particle weights underflow at one step."""

    def __init__(self, t: int, message: str):
        super().__init__(f"filter degenerate at step t={t}: {message}")
        self.t = t


@dataclass
class ParticleEnsemble:
    particles: Var                  # (K, d_x)
    log_weights: Var                # (K,) normalised: logsumexp == 0
    ancestors: np.ndarray | None = None

    @property
    def K(self) -> int:
        return self.particles.value.shape[0]


@dataclass
class FilterResult:
    means: np.ndarray               # (T, d_x) weighted particle means
    ess: np.ndarray                 # (T,) effective sample sizes
    step_loglik: np.ndarray         # (T,) logsumexp_k log w_t - log K
    objective: Var                  # sum_t sum_k log w_t (the training target)
    ensembles: list = field(default_factory=list)

    @property
    def loglik(self) -> float:
        """Standard marginal log-likelihood estimate (diagnostic)."""
        return float(self.step_loglik.sum())

    @property
    def objective_value(self) -> float:
        return float(self.objective.value)


def estimate_state(ensemble: ParticleEnsemble) -> np.ndarray:
    """Weighted particle mean on primal values."""
    w = np.exp(ensemble.log_weights.value)
    return w @ ensemble.particles.value


def effective_sample_size(log_weights: np.ndarray) -> float:
    w = np.exp(log_weights)
    return 1.0 / float((w * w).sum())


def resample_stopgrad(log_weights: Var, uniforms: np.ndarray, differentiable: bool):
    """Multinomial ancestor draws plus the gradient-carrying pre-weights.

    Ancestors are independent inverse-CDF draws from the primal normalised
    weights.  Pre-weights have primal value 1/K; in differentiable mode
    they are (1/K) * w[a] / stop_gradient(w[a]) in log space, which adds an
    exact zero to the primal but routes a gradient through the selected
    parents' weights.
    """
    lw = log_weights.value
    if not np.isfinite(lw).all():
        raise ValueError("resampling requires finite normalised log-weights")
    K = lw.shape[0]
    cdf = np.cumsum(np.exp(lw))
    ancestors = np.minimum(np.searchsorted(cdf, uniforms, side="right"), K - 1)
    tape = log_weights.tape
    log_uniform = tape.constant(np.full(K, -np.log(K)))
    if not differentiable:
        return ancestors, log_uniform
    selected = ad.gather(log_weights, ancestors)
    log_pre = log_uniform + (selected - ad.stop_gradient(selected))
    return ancestors, log_pre


class LearnedMixtureModel:
    """Gaussian-mixture head on a network, usable as transition or proposal.

    ``uses_observation=True`` gives the proposal input [x_{t-1}, y_t];
    otherwise the network sees x_{t-1} only (the Markov transition head).
    On periodic state spaces proposed particles are wrapped into [-pi, pi)
    and densities act on wrapped residuals, so the heads live on the same
    circle as the system (otherwise a particle parked 2*pi off the truth
    would carry full observation weight forever).
    """

    def __init__(self, tape_params: nets.TapeParams, S: int, d_x: int,
                 uses_observation: bool, sampler: str = "categorical",
                 temperature: float = 0.5, periodic: bool = False):
        if sampler not in ("categorical", "gumbel"):
            raise ValueError(f"unknown sampler {sampler!r}")
        self.tape_params = tape_params
        self.S = S
        self.d_x = d_x
        self.uses_observation = uses_observation
        self.sampler = sampler
        self.temperature = temperature
        self.periodic = periodic

    def mixture(self, X_prev: Var, y_t) -> GaussianMixture:
        tape = X_prev.tape
        if self.uses_observation:
            K = X_prev.value.shape[0]
            y_block = tape.constant(np.broadcast_to(y_t, (K, len(y_t))).copy())
            z0 = ad.concat([X_prev, y_block], axis=1)
        else:
            z0 = X_prev
        out = nets.forward(self.tape_params, z0)
        return nets.make_mixture(out, self.S, self.d_x)

    def propose(self, X_prev: Var, y_t, rng: np.random.Generator, need_logpdf=True):
        tape = X_prev.tape
        K = X_prev.value.shape[0]
        mix = self.mixture(X_prev, y_t)
        if self.S > 1:
            if self.sampler == "gumbel":
                u = rng.random((self.S, K))
            else:
                comps = categorical_draws(self.S, K, rng)
        eps = tape.constant(rng.standard_normal((K, self.d_x)))
        if self.S == 1:
            X = sample_mixture_stopgrad(mix, eps, np.zeros(K, dtype=np.intp))
        elif self.sampler == "gumbel":
            X = sample_mixture_reparam(mix, eps, u, self.temperature)
        else:
            X = sample_mixture_stopgrad(mix, eps, comps)
        if self.periodic:
            X = wrap_residual(X)
        log_q = log_density_mixture(mix, X, periodic=self.periodic) if need_logpdf else None
        return X, log_q

    def logpdf(self, X: Var, X_prev: Var, y_t) -> Var:
        return log_density_mixture(self.mixture(X_prev, y_t), X, periodic=self.periodic)


class TrueKernelModel:
    """The SSM's own transition kernel: numpy sampling, on-tape density."""

    def __init__(self, model):
        self.model = model

    def propose(self, X_prev: Var, y_t, rng: np.random.Generator, need_logpdf=True):
        m = self.model
        eps = rng.standard_normal(X_prev.value.shape)
        value = m.wrap(m.transition_mean(X_prev.value) + m.transition_scale() * eps)
        X = X_prev.tape.constant(value)
        log_q = self.logpdf(X, X_prev, y_t) if need_logpdf else None
        return X, log_q

    def logpdf(self, X: Var, X_prev: Var, y_t=None) -> Var:
        m = self.model
        mean = m.transition_mean_var(X_prev)
        delta = X - mean
        if m.periodic:
            shift = X.tape.constant(TWO_PI * np.round(delta.value / TWO_PI))
            delta = delta - shift
        return _fixed_scale_logpdf(delta, m.transition_scale())


def _fixed_scale_logpdf(delta: Var, sigma: np.ndarray) -> Var:
    d = delta.value.shape[-1]
    z2 = ad.square(delta * (1.0 / sigma))
    quad = ad.vsum(z2, axis=1) if delta.value.ndim == 2 else ad.vsum(z2)
    const = -0.5 * d * LOG_2PI - float(np.log(sigma).sum())
    return const - 0.5 * quad


def make_observation_logpdf(model):
    """g(y_t | x) as a tape function of the particle block X."""

    sigma = model.observation_scale()

    def obs_logpdf(X: Var, y_t) -> Var:
        delta = X.tape.constant(np.asarray(y_t, dtype=np.float64)) - X
        if model.periodic:
            shift = X.tape.constant(TWO_PI * np.round(delta.value / TWO_PI))
            delta = delta - shift
        return _fixed_scale_logpdf(delta, sigma)

    return obs_logpdf


def sir_step(ensemble: ParticleEnsemble, y_t, transition, proposal, obs_logpdf,
             rng: np.random.Generator, differentiable: bool, t: int) -> tuple:
    """One resample-propose-weight step; returns (new ensemble, log w_t).

    With proposal is transition (the bootstrap case) the transition and
    proposal densities cancel exactly, so log w_t = log g and neither
    density is evaluated.
    """
    K = ensemble.K
    uniforms = rng.random(K)
    ancestors, log_pre = resample_stopgrad(ensemble.log_weights, uniforms, differentiable)
    X_prev = ad.gather_rows(ensemble.particles, ancestors)
    bootstrap = proposal is transition
    X, log_q = proposal.propose(X_prev, y_t, rng, need_logpdf=not bootstrap)
    log_g = obs_logpdf(X, y_t)
    if bootstrap:
        log_incr = log_g
    else:
        log_f = transition.logpdf(X, X_prev, None)
        log_incr = log_g + log_f - log_q
    bad = ~np.isfinite(log_incr.value)
    if bad.mean() > 0.99:
        raise DegeneracyError(t, f"{bad.sum()}/{K} incremental log-weights are non-finite")
    log_p = log_pre + log_incr
    try:
        log_norm = ad.logsumexp(log_p)
    except FloatingPointError as exc:
        raise DegeneracyError(t, str(exc)) from exc
    log_weights = log_p - log_norm
    return ParticleEnsemble(X, log_weights, ancestors), log_incr


def run_filter(*, transition, proposal, observation_logpdf, ys, K: int,
               rng: np.random.Generator, init_sampler, differentiable: bool = False,
               tape: ad.Tape | None = None, record_ensembles: bool = False) -> FilterResult:
    """Run the filter over observations ys (T, d_y).

    The training objective accumulates sum_t sum_k log w_t, valid under
    per-step resampling (all pre-weights are 1/K in the primal).  The
    per-step marginal increments logsumexp_k(log w_t) - log K are recorded
    as diagnostics.
    """
    ys = np.asarray(ys, dtype=np.float64)
    T = ys.shape[0]
    if T < 1 or K < 1:
        raise ValueError("T and K must be >= 1")
    if tape is None:
        tape = ad.Tape()
    x0 = np.asarray(init_sampler(rng, K), dtype=np.float64)
    ensemble = ParticleEnsemble(
        tape.var(x0), tape.constant(np.full(K, -np.log(K))), None
    )
    means = np.empty((T, x0.shape[1]))
    ess = np.empty(T)
    step_loglik = np.empty(T)
    objective = None
    ensembles = []
    for t in range(1, T + 1):
        ensemble, log_incr = sir_step(
            ensemble, ys[t - 1], transition, proposal, observation_logpdf,
            rng, differentiable, t,
        )
        means[t - 1] = estimate_state(ensemble)
        ess[t - 1] = effective_sample_size(ensemble.log_weights.value)
        lw = log_incr.value
        m = lw.max()
        step_loglik[t - 1] = m + np.log(np.exp(lw - m).sum()) - np.log(K)
        contribution = ad.vsum(log_incr)
        objective = contribution if objective is None else objective + contribution
        if record_ensembles:
            ensembles.append(ensemble)
    return FilterResult(means, ess, step_loglik, objective, ensembles)


def gaussian_init_sampler(mean: np.ndarray, sigma) -> callable:
    """Filter initial distribution N(mean, diag(sigma)^2), shared by all methods."""
    mean = np.asarray(mean, dtype=np.float64)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mean.shape)

    def sample(rng: np.random.Generator, K: int) -> np.ndarray:
        return mean + sigma * rng.standard_normal((K, mean.shape[0]))

    return sample


def export_filter_result(result: FilterResult, csv_path, *, seed, config_hash,
                         truth: np.ndarray | None = None) -> None:
    """CSV of per-step summaries plus a JSON sidecar with run-level facts."""
    from pathlib import Path

    csv_path = Path(csv_path)
    T, d = result.means.shape
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"mean_{i+1}" for i in range(d)] + ["ess", "step_loglik"])
        for t in range(T):
            w.writerow(
                [t + 1]
                + [repr(float(v)) for v in result.means[t]]
                + [repr(float(result.ess[t])), repr(float(result.step_loglik[t]))]
            )
    summary = {
        "loglik": result.loglik,
        "objective": result.objective_value,
        "config_hash": config_hash,
        "seed": seed,
    }
    if truth is not None:
        err = result.means - np.asarray(truth)
        summary["mse_vs_truth"] = float((err * err).mean())
    with open(csv_path.with_suffix(".json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
