"""Command-line entry points: simulate, train, evaluate, sweep, gradcheck.

Specs are TOML; machine outputs are CSV/JSON.  All stochastic commands are
reproducible: identical config + seed give identical outputs (timing
columns aside).  Failures print a machine-readable JSON object on stderr
and exit nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import bench, filtering as pf, gradcheck, networks as nets, ssm, training


def _load_toml(path):
    if path is None:
        raise ValueError("this command requires --config <path>")
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _resolve_seed(args, doc) -> int:
    if args.seed is not None:
        return args.seed
    return int(doc.get("seed", 0))


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_from_config(doc, seed) -> ssm.StateSpaceModel:
    system = doc["system"]
    params = dict(doc.get("params", {}))
    if system == "kuramoto" and "omega_seed" not in params and "omega" not in params:
        params["omega_seed"] = seed
    return ssm.make_model({"system": system, **params})


def cmd_simulate(args) -> int:
    doc = _load_toml(args.config)
    seed = _resolve_seed(args, doc)
    model = _model_from_config(doc, seed)
    traj = ssm.simulate(model, int(doc["T"]), seed=seed, burn_in=doc.get("burn_in"))
    out = _out_dir(args)
    path = out / "trajectory.csv"
    ssm.save_trajectory(traj, path)
    print(f"wrote {path} and {path.with_suffix('.json')}")
    return 0


def _train_config_from_doc(doc, seed) -> training.TrainConfig:
    T = int(doc["T"])
    train = dict(doc.get("train", {}))
    S = int(doc.get("S", 1))
    return training.TrainConfig(
        B=int(train.get("B", int(np.ceil(T / 5)))),
        J=int(train.get("J", 50)),
        A=int(train.get("A", 20)),
        K=int(doc["K"]),
        learning_rate=float(train.get("learning_rate", 3e-3)),
        S_f=S, S_pi=S,
        hidden=tuple(train.get("hidden", (64, 64))),
        clip_norm=float(train.get("clip_norm", 10.0)),
        sampler=train.get("sampler", "categorical"),
        temperature=float(train.get("temperature", 0.5)),
        seed=seed,
    )


def cmd_train(args) -> int:
    doc = _load_toml(args.config)
    seed = _resolve_seed(args, doc)
    method = doc.get("method", "StateMixNN")
    if method not in ("StateMixNN", "PropMixNN"):
        raise ValueError(f"method must be StateMixNN or PropMixNN, got {method!r}")
    model = _model_from_config(doc, seed)
    out = _out_dir(args)
    if "series" in doc:
        traj = ssm.load_trajectory(doc["series"])
    else:
        traj = ssm.simulate(
            model, int(doc["T"]), seed=bench.derive_seed(seed, "train-series")
        )
    cfg = _train_config_from_doc(doc, seed)
    fit = (
        training.fit_transition_and_proposal
        if method == "StateMixNN"
        else training.fit_proposal_only
    )
    learned = fit(traj.observations, model, traj.states[0], cfg, out_dir=out)
    nets.save_checkpoint(
        out / "model.json",
        proposal=learned.proposal, proposal_S=learned.S_pi,
        transition=learned.transition,
        transition_S=learned.S_f,
        d_x=model.d_x, d_y=model.d_y,
        extra={"method": method, "config": cfg.as_dict(), "x0": traj.states[0].tolist(),
               "model": model.descriptor()},
    )
    training.save_history(learned.history, out / "history.csv")
    final_obj = learned.history[-1]["objective"] if learned.history else float("nan")
    print(f"trained {method}: {len(learned.history)} filter runs, "
          f"final objective {final_obj:.2f}; wrote {out / 'model.json'}")
    return 0


def cmd_evaluate(args) -> int:
    doc = _load_toml(args.config)
    seed = _resolve_seed(args, doc)
    method = doc["method"]
    traj = ssm.load_trajectory(doc["series"])
    model = ssm.make_model(traj.descriptor)
    K = int(doc["K"])
    learned = None
    if method in ("StateMixNN", "PropMixNN"):
        ckpt = nets.load_checkpoint(doc["checkpoint"])
        learned = training.LearnedModel(
            proposal=ckpt["proposal"], transition=ckpt["transition"],
            S_pi=ckpt["proposal_S"], S_f=ckpt["transition_S"],
            d_x=ckpt["d_x"], d_y=ckpt["d_y"], config=ckpt.get("extra", {}),
        )
        if method == "StateMixNN" and learned.transition is None:
            raise ValueError("checkpoint has no transition network; use method='PropMixNN'")
    elif method != "BPF":
        raise ValueError(f"unknown method {method!r}")

    from . import autodiff as ad

    tape = ad.Tape()
    transition, proposal = bench.filter_setup_for_method(
        bench.MethodSpec(method, getattr(learned, "S_pi", None)), learned, model, tape
    )
    result = pf.run_filter(
        transition=transition, proposal=proposal,
        observation_logpdf=pf.make_observation_logpdf(model),
        ys=traj.observations, K=K,
        rng=np.random.default_rng(np.random.SeedSequence([seed, 0xF117])),
        init_sampler=pf.gaussian_init_sampler(traj.states[0], model.transition_scale()),
        tape=tape,
    )
    out = _out_dir(args)
    config_hash = hashlib.sha256(
        json.dumps({**doc, "seed": seed}, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]
    path = out / "filter_result.csv"
    pf.export_filter_result(
        result, path, seed=seed, config_hash=config_hash, truth=traj.states[1:]
    )
    print(f"evaluated {method} (K={K}) on {doc['series']}: "
          f"loglik {result.loglik:.2f}; wrote {path}")
    return 0


def cmd_sweep(args) -> int:
    spec = bench.load_sweep_spec(args.config)
    if args.seed is not None:
        spec.seed = args.seed
    rows, summary = bench.run_sweep(
        spec, progress=lambda msg: print(f"  {msg}", flush=True),
        threads=max(1, args.threads),
    )
    paths = bench.write_sweep_outputs(spec, rows, summary, _out_dir(args))
    print(f"wrote {paths['metrics']} ({len(rows)} rows) and {paths['summary']}")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_all()
    print("gradient verification suites (max relative errors):")
    print(f"  primitives       : {report['primitives_max']:.3e}  (tolerance 1e-5)")
    print(f"  composite graphs : {report['composites_max']:.3e}  (tolerance 1e-5)")
    print(f"  filter objective : {report['filter_objective_max']:.3e}  (tolerance 1e-3)")
    if args.out:
        out = _out_dir(args)
        with open(out / "gradcheck.json", "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
    print("PASS" if report["passed"] else "FAIL")
    return 0 if report["passed"] else 1


def main(argv=None) -> int:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="TOML config path")
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--out", type=str, default=None, help="output directory")
    common.add_argument("--threads", type=int, default=1, help="evaluation worker pool size")

    parser = argparse.ArgumentParser(
        prog="mixpf",
        description="Particle filtering with learned Gaussian-mixture dynamics",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "simulate": cmd_simulate,
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "sweep": cmd_sweep,
        "gradcheck": cmd_gradcheck,
    }
    helps = {
        "simulate": "emit a ground-truth trajectory CSV + JSON sidecar",
        "train": "fit mixture networks; write checkpoints and history",
        "evaluate": "run a filter from a checkpoint on a stored series",
        "sweep": "full benchmark protocol from a sweep spec",
        "gradcheck": "run the finite-difference verification suites",
    }
    for name, handler in handlers.items():
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        sp.set_defaults(handler=handler)

    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except Exception as exc:  # machine-readable failure on stderr
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
