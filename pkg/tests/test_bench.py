"""Metrics, sweep mechanics, CSV schemas, CLI behaviour, reproducibility."""

import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mixpf import bench, ssm
from mixpf.bench import MethodSpec, SweepSpec

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def tiny_spec(methods=None, runs=3, values=(20,), system="lorenz96", train=None):
    fixed = {"T": 8, "K": 20, "d_x": 5, "sigma_v": 0.5, "sigma_r": 0.31622776601683794}
    if system == "kuramoto":
        fixed.update(sigma_v=0.1, sigma_r=0.005)
    return SweepSpec(
        system=system, swept="K", values=list(values), runs=runs, seed=99,
        methods=methods or [MethodSpec("BPF")], fixed=fixed,
        train=train or {"J": 2, "A": 1, "B": 2, "hidden": [8]},
    )


class TestMetrics:
    def test_mse_zero_for_perfect_estimates(self, rng):
        x = rng.normal(size=(7, 3))
        assert bench.compute_mse(x, x) == 0.0

    def test_mse_constant_offset(self, rng):
        x = rng.normal(size=(7, 3))
        assert np.isclose(bench.compute_mse(x + 0.3, x), 0.09, atol=1e-12)

    def test_mse_matches_double_loop_oracle(self, rng):
        est = rng.normal(size=(5, 4))
        tru = rng.normal(size=(5, 4))
        total = 0.0
        for t in range(5):
            for i in range(4):
                total += (est[t, i] - tru[t, i]) ** 2
        assert np.isclose(bench.compute_mse(est, tru), total / 20.0, atol=1e-12)

    def test_mse_shape_mismatch(self):
        with pytest.raises(ValueError):
            bench.compute_mse(np.zeros((3, 2)), np.zeros((4, 2)))

    def test_relative_improvement(self):
        assert bench.relative_improvement(1.0, 1.0) == 1.0
        assert bench.relative_improvement(0.75, 1.0) == 0.75
        with pytest.raises(ValueError):
            bench.relative_improvement(1.0, 0.0)


class TestSweep:
    def test_bpf_only_sweep_has_unit_relative_mse(self):
        rows, summary = bench.run_sweep(tiny_spec(runs=3))
        assert len(rows) == 3
        assert all(r["ri_mse"] == 1.0 for r in rows)
        assert summary[0]["ri_mse_mean"] == 1.0 and summary[0]["n_runs"] == 3

    def test_methods_paired_on_identical_series(self):
        spec = tiny_spec(
            methods=[MethodSpec("BPF"), MethodSpec("PropMixNN", 1)], runs=2
        )
        rows, _ = bench.run_sweep(spec)
        by_run = {}
        for r in rows:
            by_run.setdefault(r["run"], set()).add(r["series_hash"])
        assert all(len(hashes) == 1 for hashes in by_run.values())
        assert len({r["series_hash"] for r in rows}) == 2  # distinct across runs

    def test_summary_recomputes_from_rows(self):
        spec = tiny_spec(methods=[MethodSpec("BPF"), MethodSpec("PropMixNN", 1)], runs=3)
        rows, summary = bench.run_sweep(spec)
        again = bench.summarize(spec, rows)
        for a, b in zip(summary, again):
            assert a == b
        prop = [s for s in summary if s["method"] == "PropMixNN"][0]
        vals = [r["ri_mse"] for r in rows if r["method"] == "PropMixNN"]
        assert np.isclose(prop["ri_mse_mean"], np.mean(vals))
        assert np.isclose(prop["ri_mse_p2_5"], np.percentile(vals, 2.5))

    def test_iapf_reserved_but_absent(self):
        spec = tiny_spec(methods=[MethodSpec("BPF"), MethodSpec("IAPF")], runs=2)
        rows, summary = bench.run_sweep(spec)
        assert not any(r["method"] == "IAPF" for r in rows)
        iapf = [s for s in summary if s["method"] == "IAPF"][0]
        assert iapf["n_runs"] == 0 and iapf["ri_mse_mean"] is None

    def test_training_failure_marks_cell_absent(self, monkeypatch):
        spec = tiny_spec(methods=[MethodSpec("BPF"), MethodSpec("StateMixNN", 1)], runs=2)

        def boom(*a, **k):
            from mixpf.filtering import DegeneracyError

            raise DegeneracyError(1, "synthetic failure")

        monkeypatch.setattr(bench, "train_method", boom)
        rows, summary = bench.run_sweep(spec)
        assert all(r["method"] == "BPF" for r in rows)
        smn = [s for s in summary if s["method"] == "StateMixNN"][0]
        assert smn["n_runs"] == 0 and smn.get("absent") is True

    def test_thread_pool_gives_identical_rows(self):
        spec = tiny_spec(runs=3)
        rows1, _ = bench.run_sweep(spec, threads=1)
        rows2, _ = bench.run_sweep(spec, threads=2)
        strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rs]
        assert strip(rows1) == strip(rows2)

    def test_spec_round_trip_is_exact(self, tmp_path):
        path = CONFIGS / "sweep_lorenz96_desk.toml"
        a = bench.load_sweep_spec(path)
        b = bench.load_sweep_spec(path)
        assert a.resolved() == b.resolved()
        assert a.config_hash() == b.config_hash()

    def test_csv_schemas(self, tmp_path):
        spec = tiny_spec(runs=2)
        rows, summary = bench.run_sweep(spec)
        paths = bench.write_sweep_outputs(spec, rows, summary, tmp_path)
        with open(paths["metrics"]) as fh:
            header = next(csv.reader(fh))
        assert header == bench.METRICS_COLUMNS
        with open(paths["summary"]) as fh:
            header = next(csv.reader(fh))
        assert header == bench.SUMMARY_COLUMNS
        cfg = json.loads(paths["config"].read_text())
        assert cfg["config_hash"] == spec.config_hash()


def run_cli(*argv, cwd=None):
    return subprocess.run(
        [sys.executable, "-m", "mixpf.cli", *argv],
        capture_output=True, text=True, cwd=cwd,
    )


class TestCli:
    def test_simulate_smoke(self, tmp_path):
        out = run_cli(
            "simulate", "--config", str(CONFIGS / "lorenz96_default.toml"),
            "--seed", "7", "--out", str(tmp_path),
        )
        assert out.returncode == 0, out.stderr
        assert (tmp_path / "trajectory.csv").exists()
        sidecar = json.loads((tmp_path / "trajectory.json").read_text())
        assert sidecar["seed"] == 7 and sidecar["model"]["system"] == "lorenz96"

    def test_simulate_rerun_is_bitwise_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            out = run_cli(
                "simulate", "--config", str(CONFIGS / "kuramoto_default.toml"),
                "--seed", "3", "--out", str(d),
            )
            assert out.returncode == 0, out.stderr
        assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()
        assert (a / "trajectory.json").read_bytes() == (b / "trajectory.json").read_bytes()

    def test_train_then_evaluate(self, tmp_path):
        train_cfg = tmp_path / "train.toml"
        train_cfg.write_text(
            'system = "lorenz96"\nmethod = "PropMixNN"\nT = 6\nK = 10\nS = 1\nseed = 1\n'
            "[params]\nd_x = 5\nsigma_v = 0.5\nsigma_r = 0.31622776601683794\n"
            "[train]\nJ = 1\nA = 1\nB = 2\nhidden = [8]\n"
        )
        out = run_cli("train", "--config", str(train_cfg), "--out", str(tmp_path / "run"))
        assert out.returncode == 0, out.stderr
        assert (tmp_path / "run" / "model.json").exists()
        assert (tmp_path / "run" / "history.csv").exists()

        sim_cfg = tmp_path / "sim.toml"
        sim_cfg.write_text(
            'system = "lorenz96"\nT = 6\nseed = 9\n'
            "[params]\nd_x = 5\nsigma_v = 0.5\nsigma_r = 0.31622776601683794\n"
        )
        out = run_cli("simulate", "--config", str(sim_cfg), "--out", str(tmp_path / "data"))
        assert out.returncode == 0, out.stderr

        eval_cfg = tmp_path / "eval.toml"
        eval_cfg.write_text(
            'method = "PropMixNN"\nK = 10\nseed = 2\n'
            f'series = "{tmp_path / "data" / "trajectory.csv"}"\n'
            f'checkpoint = "{tmp_path / "run" / "model.json"}"\n'
        )
        out = run_cli("evaluate", "--config", str(eval_cfg), "--out", str(tmp_path / "eval"))
        assert out.returncode == 0, out.stderr
        summary = json.loads((tmp_path / "eval" / "filter_result.json").read_text())
        assert "mse_vs_truth" in summary and "loglik" in summary

    def test_gradcheck_exits_zero(self, tmp_path):
        out = run_cli("gradcheck", "--out", str(tmp_path))
        assert out.returncode == 0, out.stderr
        assert "PASS" in out.stdout
        report = json.loads((tmp_path / "gradcheck.json").read_text())
        assert report["passed"] is True

    def test_sweep_writes_metrics(self, tmp_path):
        spec = tmp_path / "sweep.toml"
        spec.write_text(
            'system = "lorenz96"\nswept = "K"\nvalues = [10]\nruns = 2\nseed = 5\n'
            'methods = [ { name = "BPF" } ]\n'
            "[fixed]\nT = 5\nK = 10\nd_x = 5\nsigma_v = 0.5\nsigma_r = 0.31622776601683794\n"
        )
        out = run_cli("sweep", "--config", str(spec), "--out", str(tmp_path / "res"))
        assert out.returncode == 0, out.stderr
        with open(tmp_path / "res" / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 and all(r["ri_mse"] == "1.0" for r in rows)

    def test_error_is_machine_readable_json(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text('system = "nope"\nT = 5\n')
        out = run_cli("simulate", "--config", str(bad), "--out", str(tmp_path))
        assert out.returncode == 1
        err = json.loads(out.stderr.strip().splitlines()[-1])
        assert err["error"] == "ValueError" and "nope" in err["message"]

    def test_missing_config_is_an_error(self):
        out = run_cli("simulate")
        assert out.returncode == 1
        err = json.loads(out.stderr.strip().splitlines()[-1])
        assert "config" in err["message"]
