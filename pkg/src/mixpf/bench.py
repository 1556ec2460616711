"""Benchmark harness: paired evaluation sweeps over particle count,
series length, state noise and dimension, with relative-MSE metrics
against the bootstrap baseline.

A sweep cell = one swept value.  Per cell the harness trains each learned
method once on a dedicated series, then evaluates every method on `runs`
fresh series; within a (cell, run) pair all methods see the identical
observation series (hash-recorded).  Summaries are empirical means with
[2.5, 97.5] percentile bands, recomputed purely from the per-run rows.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import filtering as pf
from . import ssm as ssm_mod
from . import training
from .streams import substream

KNOWN_METHODS = ("BPF", "StateMixNN", "PropMixNN", "IAPF")
SWEEPABLE = ("K", "T", "sigma_v", "d_x")


def compute_mse(estimates: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared error per time step and coordinate."""
    estimates = np.asarray(estimates, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimates.shape != truth.shape:
        raise ValueError(f"shape mismatch {estimates.shape} vs {truth.shape}")
    diff = estimates - truth
    return float((diff * diff).mean())


def relative_improvement(mse_method: float, mse_baseline: float) -> float:
    """Method MSE over baseline MSE; below 1 means the method is better."""
    if mse_baseline <= 0:
        raise ValueError("baseline MSE must be positive")
    return mse_method / mse_baseline


def derive_seed(*keys) -> int:
    """Stable non-negative integer derived from a key tuple."""
    from .streams import _as_int

    ss = np.random.SeedSequence([_as_int(k) for k in keys])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# sweep specification

@dataclass
class MethodSpec:
    name: str
    S: int | None = None

    def label(self) -> str:
        return self.name if self.S is None else f"{self.name}(S={self.S})"


@dataclass
class SweepSpec:
    system: str
    swept: str
    values: list
    runs: int
    seed: int
    methods: list
    fixed: dict
    train: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        return {
            "system": self.system,
            "swept": self.swept,
            "values": list(self.values),
            "runs": self.runs,
            "seed": self.seed,
            "methods": [{"name": m.name, "S": m.S} for m in self.methods],
            "fixed": dict(self.fixed),
            "train": dict(self.train),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_sweep_spec(path) -> SweepSpec:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    if doc["system"] not in ("lorenz96", "kuramoto"):
        raise ValueError(f"unknown system {doc['system']!r}")
    if doc["swept"] not in SWEEPABLE:
        raise ValueError(f"swept must be one of {SWEEPABLE}, got {doc['swept']!r}")
    methods = []
    for m in doc["methods"]:
        if m["name"] not in KNOWN_METHODS:
            raise ValueError(f"unknown method {m['name']!r}")
        methods.append(MethodSpec(m["name"], m.get("S")))
    return SweepSpec(
        system=doc["system"],
        swept=doc["swept"],
        values=list(doc["values"]),
        runs=int(doc.get("runs", 20)),
        seed=int(doc.get("seed", 0)),
        methods=methods,
        fixed=dict(doc.get("fixed", {})),
        train=dict(doc.get("train", {})),
    )


def cell_params(spec: SweepSpec, value) -> dict:
    params = dict(spec.fixed)
    params[spec.swept] = value
    return params


def build_model(spec: SweepSpec, params: dict) -> ssm_mod.StateSpaceModel:
    d_x = int(params["d_x"])
    dt = float(params.get("dt", 0.05))
    sigma_v = float(params["sigma_v"])
    sigma_r = float(params["sigma_r"])
    if spec.system == "lorenz96":
        return ssm_mod.Lorenz96(
            d_x=d_x, F=float(params.get("F", 8.0)), dt=dt,
            sigma_v=sigma_v, sigma_r=sigma_r,
        )
    omega_seed = derive_seed(spec.seed, "omega", d_x)
    return ssm_mod.Kuramoto(
        d_x=d_x, C=float(params.get("C", 0.8)), dt=dt,
        sigma_v=sigma_v, sigma_r=sigma_r, omega_seed=omega_seed,
    )


def make_train_config(spec: SweepSpec, params: dict, method: MethodSpec) -> training.TrainConfig:
    T = int(params["T"])
    train = dict(spec.train)
    S = method.S if method.S is not None else 1
    return training.TrainConfig(
        B=int(train.get("B", int(np.ceil(T / 5)))),
        J=int(train.get("J", 50)),
        A=int(train.get("A", 20)),
        K=int(params["K"]),
        learning_rate=float(train.get("learning_rate", 3e-3)),
        S_f=S, S_pi=S,
        hidden=tuple(train.get("hidden", (64, 64))),
        clip_norm=float(train.get("clip_norm", 10.0)),
        sampler=train.get("sampler", "categorical"),
        temperature=float(train.get("temperature", 0.5)),
        seed=derive_seed(spec.seed, "train", spec.swept, str(params[spec.swept]), method.label()),
    )


def train_method(spec: SweepSpec, params: dict, method: MethodSpec,
                 model, train_traj) -> training.LearnedModel | None:
    if method.name == "BPF":
        return None
    cfg = make_train_config(spec, params, method)
    ys = train_traj.observations
    x0 = train_traj.states[0]
    if method.name == "StateMixNN":
        return training.fit_transition_and_proposal(ys, model, x0, cfg)
    if method.name == "PropMixNN":
        return training.fit_proposal_only(ys, model, x0, cfg)
    raise ValueError(f"method {method.name} is not trainable here")


def filter_setup_for_method(method: MethodSpec, learned, model, tape):
    """Transition/proposal objects for one evaluation run."""
    from . import networks as nets

    if method.name == "BPF":
        kernel = pf.TrueKernelModel(model)
        return kernel, kernel
    if method.name == "StateMixNN":
        trans = pf.LearnedMixtureModel(
            nets.lift_params(tape, learned.transition), learned.S_f, model.d_x,
            uses_observation=False, periodic=model.periodic,
        )
        prop = pf.LearnedMixtureModel(
            nets.lift_params(tape, learned.proposal), learned.S_pi, model.d_x,
            uses_observation=True, periodic=model.periodic,
        )
        return trans, prop
    if method.name == "PropMixNN":
        prop = pf.LearnedMixtureModel(
            nets.lift_params(tape, learned.proposal), learned.S_pi, model.d_x,
            uses_observation=True, periodic=model.periodic,
        )
        return pf.TrueKernelModel(model), prop
    raise ValueError(f"method {method.name} cannot be evaluated")


def evaluate_method_on_series(method: MethodSpec, learned, model, traj, K: int,
                              rng) -> dict:
    from . import autodiff as ad

    t0 = time.perf_counter()
    tape = ad.Tape()
    transition, proposal = filter_setup_for_method(method, learned, model, tape)
    result = pf.run_filter(
        transition=transition, proposal=proposal,
        observation_logpdf=pf.make_observation_logpdf(model),
        ys=traj.observations, K=K, rng=rng,
        init_sampler=pf.gaussian_init_sampler(traj.states[0], model.transition_scale()),
        tape=tape,
    )
    return {
        "mse": compute_mse(result.means, traj.states[1:]),
        "loglik": result.loglik,
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }


def _evaluate_run_task(task: dict) -> list:
    """Evaluate every method on one fresh observation series (one paired
    comparison over the cell's shared latent path).

    Self-contained and picklable so sweep evaluation can fan out over a
    process pool; each worker owns its RNG substreams and tapes.
    """
    spec_seed = task["seed"]
    swept, value, run = task["swept"], task["value"], task["run"]
    model = ssm_mod.make_model(task["model_descriptor"])
    base = ssm_mod.simulate(model, task["T"], seed=task["latent_seed"])
    traj = ssm_mod.reobserve(
        model, base, derive_seed(spec_seed, "eval-obs", swept, str(value), run)
    )
    K = task["K"]
    baseline = evaluate_method_on_series(
        MethodSpec("BPF"), None, model, traj, K,
        substream(spec_seed, "filter", swept, str(value), run, "BPF"),
    )
    rows = []
    for method, learned in task["methods"]:
        if method.name == "BPF":
            outcome = baseline
        else:
            if learned is None:
                continue
            outcome = evaluate_method_on_series(
                method, learned, model, traj, K,
                substream(spec_seed, "filter", swept, str(value), run, method.label()),
            )
        rows.append({
            "system": task["system"],
            "swept_key": swept,
            "swept_value": value,
            "method": method.name,
            "S": method.S,
            "run": run,
            "series_hash": traj.series_hash(),
            "mse": outcome["mse"],
            "ri_mse": relative_improvement(outcome["mse"], baseline["mse"]),
            "loglik": outcome["loglik"],
            "wall_ms": outcome["wall_ms"],
        })
    return rows


def run_sweep(spec: SweepSpec, progress=None, threads: int = 1) -> tuple[list, list]:
    """Execute the full sweep; returns (metric rows, summary rows).

    Per cell: one latent ground-truth path is simulated, the learned
    methods are trained once on a dedicated observation realisation of it,
    and every method is then evaluated on `runs` fresh observation
    realisations (paired: all methods see the identical series per run).
    Training per cell is sequential; evaluation runs fan out over a
    process pool when threads > 1 (row order is identical either way).
    Training failures mark the (cell, method) absent instead of aborting.
    """
    rows = []
    absent = []
    for value in spec.values:
        params = cell_params(spec, value)
        model = build_model(spec, params)
        T = int(params["T"])
        K = int(params["K"])
        latent_seed = derive_seed(spec.seed, "latent", spec.swept, str(value))
        base = ssm_mod.simulate(model, T, seed=latent_seed)
        train_traj = ssm_mod.reobserve(
            model, base, derive_seed(spec.seed, "train-obs", spec.swept, str(value))
        )
        method_pairs = []
        for method in spec.methods:
            if method.name == "IAPF":
                continue
            learned = None
            if method.name not in ("BPF",):
                if progress:
                    progress(f"training {method.label()} at {spec.swept}={value}")
                try:
                    learned = train_method(spec, params, method, model, train_traj)
                except (pf.DegeneracyError, FloatingPointError) as exc:
                    absent.append((value, method, str(exc)))
                    learned = None
            method_pairs.append((method, learned))
        tasks = [
            {
                "seed": spec.seed, "system": spec.system, "swept": spec.swept,
                "value": value, "run": run, "T": T, "K": K,
                "latent_seed": latent_seed,
                "model_descriptor": model.descriptor(), "methods": method_pairs,
            }
            for run in range(spec.runs)
        ]
        if threads > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=threads) as pool:
                per_run = list(pool.map(_evaluate_run_task, tasks))
        else:
            per_run = [_evaluate_run_task(t) for t in tasks]
        for run, run_rows in enumerate(per_run):
            rows.extend(run_rows)
            if progress and (run + 1) % 10 == 0:
                progress(f"{spec.swept}={value}: {run + 1}/{spec.runs} runs")
    summary = summarize(spec, rows, absent)
    return rows, summary


def summarize(spec: SweepSpec, rows: list, absent: list | None = None) -> list:
    """Per (swept value, method) summary recomputed from the rows alone."""
    summary = []
    absent = absent or []
    absent_keys = {(v, m.name, m.S) for v, m, _ in absent}
    for value in spec.values:
        for method in spec.methods:
            selected = [
                r["ri_mse"]
                for r in rows
                if r["swept_value"] == value
                and r["method"] == method.name
                and r["S"] == method.S
            ]
            entry = {
                "system": spec.system,
                "swept_key": spec.swept,
                "swept_value": value,
                "method": method.name,
                "S": method.S,
                "n_runs": len(selected),
            }
            if selected:
                arr = np.array(selected)
                entry.update(
                    ri_mse_mean=float(arr.mean()),
                    ri_mse_p2_5=float(np.percentile(arr, 2.5)),
                    ri_mse_p97_5=float(np.percentile(arr, 97.5)),
                )
            else:
                # IAPF is reserved-but-absent; failed cells land here too
                entry.update(ri_mse_mean=None, ri_mse_p2_5=None, ri_mse_p97_5=None)
                if (value, method.name, method.S) in absent_keys:
                    entry["absent"] = True
            summary.append(entry)
    return summary


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


METRICS_COLUMNS = [
    "system", "swept_key", "swept_value", "method", "S", "run",
    "series_hash", "mse", "ri_mse", "loglik", "wall_ms",
]

SUMMARY_COLUMNS = [
    "system", "swept_key", "swept_value", "method", "S",
    "ri_mse_mean", "ri_mse_p2_5", "ri_mse_p97_5", "n_runs",
]


def write_metrics_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in METRICS_COLUMNS])


def write_summary_csv(summary: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in summary:
            w.writerow([_fmt(r.get(c)) for c in SUMMARY_COLUMNS])


def write_sweep_outputs(spec: SweepSpec, rows: list, summary: list, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out_dir / "metrics.csv",
        "summary": out_dir / "summary.csv",
        "config": out_dir / "resolved_config.json",
    }
    write_metrics_csv(rows, paths["metrics"])
    write_summary_csv(summary, paths["summary"])
    with open(paths["config"], "w") as fh:
        json.dump(
            {"config": spec.resolved(), "config_hash": spec.config_hash()},
            fh, indent=1, sort_keys=True,
        )
    return paths
