"""Training loop structure: telescoping prefixes, alternation order,
static-parameter purity, run counting, reproducibility."""

import numpy as np
import pytest

from mixpf import filtering as pf
from mixpf import networks as nets
from mixpf import ssm, training
from mixpf.training import TrainConfig


def lgssm_setup(T=10, seed=100):
    model = ssm.LinearGaussian1D(a=0.9, q=0.5, r=0.5)
    traj = ssm.simulate(model, T=T, seed=seed)
    init = pf.gaussian_init_sampler(traj.states[0], model.transition_scale())
    return model, traj, init


class TestBatchPrefixes:
    def test_paper_defaults_give_multiples_of_five(self):
        # T=100, B=20: y^(b) = y_{1:5b}
        for b in range(1, 21):
            assert training.batch_prefix_length(b, 20, 100) == 5 * b

    def test_prefixes_are_nested_and_cover_everything(self):
        T, B = 33, 7
        lengths = [training.batch_prefix_length(b, B, T) for b in range(1, B + 1)]
        assert lengths == sorted(lengths)
        assert lengths[-1] == T

    def test_single_batch_is_full_series(self):
        assert training.batch_prefix_length(1, 1, 42) == 42


class TestUpdateStep:
    def test_zero_learning_rate_is_identity(self):
        model, traj, init = lgssm_setup()
        cfg = TrainConfig(B=1, J=1, A=1, K=10, learning_rate=0.0, seed=1, hidden=(8,))
        theta = nets.init_params([2, 8, 2], np.random.default_rng(2))
        adam = nets.adam_init(theta, 0.0)
        out, _ = training.update_step(
            theta, model, "prop", traj.observations, model, init, cfg, adam,
            np.random.default_rng(3),
        )
        assert out.fingerprint() == theta.fingerprint()

    def test_static_params_bitwise_unchanged(self):
        model, traj, init = lgssm_setup()
        cfg = TrainConfig(B=1, J=1, A=1, K=10, seed=1, hidden=(8,))
        theta_pi = nets.init_params([2, 8, 2], np.random.default_rng(2))
        theta_f = nets.init_params([1, 8, 2], np.random.default_rng(3))
        before = theta_f.fingerprint()
        adam = nets.adam_init(theta_pi, cfg.learning_rate)
        new_pi, _ = training.update_step(
            theta_pi, theta_f, "prop", traj.observations, model, init, cfg, adam,
            np.random.default_rng(4),
        )
        assert theta_f.fingerprint() == before
        assert new_pi.fingerprint() != theta_pi.fingerprint()

    def test_objective_improves_learning_proposal_against_true_kernel(self):
        # 50 steps on the linear-Gaussian model; the smoothed objective
        # series must rise in at least 80% of consecutive pairs
        model, traj, init = lgssm_setup()
        cfg = TrainConfig(B=1, J=50, A=1, K=30, seed=7, hidden=(16,))
        history = []
        training.conditional_update(
            1, 50, nets.init_params([2, 16, 2], np.random.default_rng(7)), model,
            traj.observations, role="prop", model=model, init_sampler=init,
            cfg=cfg, iteration=1, history=history,
        )
        objs = np.array([h["objective"] for h in history])
        smoothed = np.convolve(objs, np.ones(9) / 9, mode="valid")
        assert (np.diff(smoothed) > 0).mean() >= 0.8


class TestConditionalUpdate:
    def test_runs_filter_exactly_B_times_J(self):
        model, traj, init = lgssm_setup()
        cfg = TrainConfig(B=3, J=4, A=1, K=8, seed=2, hidden=(8,))
        history = []
        training.conditional_update(
            3, 4, nets.init_params([2, 8, 2], np.random.default_rng(0)), model,
            traj.observations, role="prop", model=model, init_sampler=init,
            cfg=cfg, iteration=1, history=history,
        )
        assert len(history) == 3 * 4
        assert [(h["b"], h["j"]) for h in history] == [
            (b, j) for b in range(1, 4) for j in range(1, 5)
        ]

    def test_B_larger_than_T_rejected(self):
        model, traj, init = lgssm_setup(T=5)
        cfg = TrainConfig(B=6, J=1, A=1, K=8, seed=2, hidden=(8,))
        with pytest.raises(ValueError):
            training.conditional_update(
                6, 1, nets.init_params([2, 8, 2], np.random.default_rng(0)), model,
                traj.observations, role="prop", model=model, init_sampler=init,
                cfg=cfg, iteration=1, history=[],
            )


class TestFitTransitionAndProposal:
    def test_zero_iterations_returns_warmup_and_untrained_proposal(self):
        model, traj, init = lgssm_setup(T=6)
        cfg = TrainConfig(B=2, J=2, A=0, K=8, seed=5, hidden=(8,))
        learned = training.fit_transition_and_proposal(
            traj.observations, model, traj.states[0], cfg
        )
        untrained_pi = nets.init_params(
            [2, 8, 2 * cfg.S_pi], training.substream(cfg.seed, "init-pi")
        )
        assert learned.proposal.fingerprint() == untrained_pi.fingerprint()
        assert all(h["phase"] == "warmup" for h in learned.history)
        assert len(learned.history) == 2 * 2  # warm-up only: B*J runs

    def test_alternation_uses_fresh_proposal_for_transition_update(self, monkeypatch):
        model, traj, init = lgssm_setup(T=6)
        cfg = TrainConfig(B=1, J=1, A=2, K=8, seed=5, hidden=(8,))
        calls = []
        fresh = iter(range(1000))

        def stub(B, J, theta_0, theta_static, ys, *, role, model, init_sampler,
                 cfg, iteration, history):
            out = theta_0.copy()
            out.tag = next(fresh)  # distinguishable identity
            calls.append({
                "role": role, "a": iteration,
                "theta_0": theta_0, "static": theta_static, "out": out,
            })
            return out

        monkeypatch.setattr(training, "conditional_update", stub)
        training.fit_transition_and_proposal(traj.observations, model, traj.states[0], cfg)
        warmup, p1, f1, p2, f2 = calls
        assert warmup["role"] == "warmup" and warmup["static"] is warmup["theta_0"]
        # iteration a: proposal update conditions on theta_f from a-1 ...
        assert p1["static"] is warmup["out"]
        # ... and the transition update conditions on the NEW proposal theta_a
        assert f1["static"] is p1["out"]
        assert f1["theta_0"] is warmup["out"]
        assert p2["static"] is f1["out"]
        assert f2["static"] is p2["out"]

    def test_total_filter_runs_2ABJ_plus_BJ(self):
        model, traj, init = lgssm_setup(T=6)
        cfg = TrainConfig(B=2, J=2, A=2, K=8, seed=5, hidden=(8,))
        learned = training.fit_transition_and_proposal(
            traj.observations, model, traj.states[0], cfg
        )
        assert len(learned.history) == 2 * 2 * 2 * 2 + 2 * 2
        phases = {h["phase"] for h in learned.history}
        assert phases == {"warmup", "prop", "trans"}

    def test_fixed_seed_training_is_bitwise_reproducible(self):
        model, traj, _ = lgssm_setup(T=6)
        cfg = TrainConfig(B=2, J=2, A=1, K=8, seed=11, hidden=(8,))
        a = training.fit_transition_and_proposal(traj.observations, model, traj.states[0], cfg)
        b = training.fit_transition_and_proposal(traj.observations, model, traj.states[0], cfg)
        assert a.proposal.fingerprint() == b.proposal.fingerprint()
        assert a.transition.fingerprint() == b.transition.fingerprint()

    def test_checkpoints_written_per_iteration(self, tmp_path):
        model, traj, _ = lgssm_setup(T=6)
        cfg = TrainConfig(B=1, J=1, A=2, K=8, seed=5, hidden=(8,))
        training.fit_transition_and_proposal(
            traj.observations, model, traj.states[0], cfg, out_dir=tmp_path
        )
        names = sorted(p.name for p in tmp_path.glob("checkpoint_*.json"))
        assert names == [
            "checkpoint_iter001.json", "checkpoint_iter002.json", "checkpoint_warmup.json",
        ]


class TestFitProposalOnly:
    def test_no_transition_network_in_checkpoint(self, tmp_path):
        model, traj, _ = lgssm_setup(T=6)
        cfg = TrainConfig(B=1, J=1, A=1, K=8, seed=5, hidden=(8,))
        learned = training.fit_proposal_only(
            traj.observations, model, traj.states[0], cfg, out_dir=tmp_path
        )
        assert learned.transition is None
        loaded = nets.load_checkpoint(tmp_path / "checkpoint_iter001.json")
        assert loaded["transition"] is None

    def test_exact_proposal_with_zero_lr_behaves_as_bootstrap(self):
        # proposal net hand-built to emit exactly the true kernel: the
        # filter must then track the plain bootstrap run (same draws)
        model, traj, init = lgssm_setup(T=12, seed=44)
        exact = nets.NetworkParams(
            [np.array([[model.a, 0.0], [0.0, 0.0]])],
            [np.array([0.0, np.sqrt(model.q)])],
            ["identity"],
        )
        from mixpf import autodiff as ad

        tape = ad.Tape()
        proposal = pf.LearnedMixtureModel(nets.lift_params(tape, exact), 1, 1, True)
        res_prop = pf.run_filter(
            transition=pf.TrueKernelModel(model), proposal=proposal,
            observation_logpdf=pf.make_observation_logpdf(model),
            ys=traj.observations, K=20, rng=np.random.default_rng(3),
            init_sampler=init, tape=tape,
        )
        kernel = pf.TrueKernelModel(model)
        res_bpf = pf.run_filter(
            transition=kernel, proposal=kernel,
            observation_logpdf=pf.make_observation_logpdf(model),
            ys=traj.observations, K=20, rng=np.random.default_rng(3),
            init_sampler=init,
        )
        np.testing.assert_allclose(res_prop.means, res_bpf.means, atol=1e-9)


class TestHistoryExport:
    def test_history_csv_columns(self, tmp_path):
        model, traj, _ = lgssm_setup(T=6)
        cfg = TrainConfig(B=1, J=2, A=1, K=8, seed=5, hidden=(8,))
        learned = training.fit_proposal_only(traj.observations, model, traj.states[0], cfg)
        path = tmp_path / "history.csv"
        training.save_history(learned.history, path)
        header = path.read_text().splitlines()[0]
        assert header == "phase,a,b,j,objective,grad_norm,clipped,wall_ms"
        assert len(path.read_text().splitlines()) == 1 + len(learned.history)
