"""Objective terms, annealing schedule, optimizer smoke tests."""

import numpy as np
import pytest

import gaitcal as g
from gaitcal.autodiff import vsum, sin
from gaitcal.inference import (FitConfig, FitFailure, FitReport, LossWeights,
                               NoiseModel, anneal_lambda_ece, gradient_check,
                               internal_ece, keypoint_nll, total_loss)
from gaitcal.synth import GaitScenario


def tiny_trial(seed: int = 0):
    scn = GaitScenario(name="tiny", duration=1.5, rate=16.0, n_cameras=2,
                       base_sigma=1.0, score_coupling=0.2, seed=seed)
    bundle = g.generate_trajectory(scn)
    obs, rig = g.render_observations(bundle)
    return bundle, obs, rig


TINY_WEIGHTS = LossWeights(n_iter=150, mc_draws=2)
TINY_CONFIG = FitConfig(basis_spacing=0.5, rank=2)


class TestWeights:
    @pytest.mark.parametrize("kwargs", [
        {"entropy": -1.0},
        {"ece_full": -0.1},
        {"anneal_fraction": 1.5},
        {"mc_draws": 0},
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            LossWeights(**kwargs)


class TestNoiseModel:
    def test_scale_nonincreasing_in_score(self):
        nm = NoiseModel()
        s = np.linspace(0.01, 0.999, 200)
        sig = nm.sigma(s)
        assert np.all(np.diff(sig) <= 1e-12)
        assert nm.sigma(1.0) == pytest.approx(2.0, rel=1e-5)

    def test_guard_boosts_only_low_scores(self):
        hot = NoiseModel(c=5.0)
        cold = NoiseModel(c=-20.0)
        assert hot.sigma(0.05) > 3.0 * cold.sigma(0.05)
        assert hot.sigma(0.95) == pytest.approx(cold.sigma(0.95), rel=1e-3)


class TestAnnealSchedule:
    def test_flat_then_linear(self):
        n, lam = 1000, 0.5
        for i in range(0, n // 2 + 1):
            assert anneal_lambda_ece(i, n, lam) == 0.0
        assert anneal_lambda_ece(n, n, lam) == lam
        assert anneal_lambda_ece(3 * n // 4, n, lam) == pytest.approx(lam / 2)
        # linear: equal increments on the active half
        vals = [anneal_lambda_ece(i, n, lam) for i in range(n // 2, n + 1)]
        assert np.allclose(np.diff(vals), lam / (n / 2))

    def test_full_fraction_edge(self):
        assert anneal_lambda_ece(10, 10, 0.3, anneal_fraction=1.0) == 0.3
        assert anneal_lambda_ece(9, 10, 0.3, anneal_fraction=1.0) == 0.0

    def test_range_checked(self):
        with pytest.raises(ValueError):
            anneal_lambda_ece(-1, 10, 0.5)
        with pytest.raises(ValueError):
            anneal_lambda_ece(11, 10, 0.5)


class TestGradientCheck:
    def test_analytic_function_passes(self):
        params = {"x": np.linspace(-1, 1, 5), "y": np.linspace(0.2, 0.9, 5)}

        def loss_fn(leaves):
            x, y = leaves["x"], leaves["y"]
            return vsum(x * x) * 0.5 + vsum(sin(y) * x)

        assert gradient_check(loss_fn, params) < 1e-6

    def test_size_cap(self):
        with pytest.raises(ValueError, match="too large"):
            gradient_check(lambda lv: vsum(lv["x"]), {"x": np.zeros(300)})


@pytest.fixture(scope="module")
def tiny_fit():
    bundle, obs, rig = tiny_trial()
    traj, offsets, noise, report = g.fit(obs, bundle.chain, rig,
                                         weights=TINY_WEIGHTS,
                                         config=TINY_CONFIG, seed=0)
    return bundle, obs, rig, traj, offsets, noise, report


class TestFit:
    def test_loss_decreases(self, tiny_fit):
        *_, report = tiny_fit
        early = np.mean([r["total"] for r in report.trace[:10]])
        assert report.final_loss < early
        assert len(report.trace) == TINY_WEIGHTS.n_iter

    def test_shapes_and_finiteness(self, tiny_fit):
        bundle, obs, rig, traj, offsets, noise, report = tiny_fit
        assert traj.dim == bundle.q.shape[1]
        assert traj.rank == TINY_CONFIG.rank
        assert offsets.values.shape == (bundle.chain.n_sites, 3)
        assert np.all(np.isfinite(offsets.values))
        assert np.all(noise.sigma([0.1, 0.5, 0.9]) > 0)
        moments = g.evaluate(traj, float(bundle.times[3]))
        assert np.all(moments.sigma > 0)

    def test_internal_ece_traced(self, tiny_fit):
        *_, report = tiny_fit
        assert len(report.internal_ece_trace) >= 2
        for i, v in report.internal_ece_trace:
            assert 0 <= v <= 0.5

    def test_deterministic(self, tiny_fit):
        bundle, obs, rig, traj, *_ , report = tiny_fit
        traj2, _, _, report2 = g.fit(obs, bundle.chain, rig,
                                     weights=TINY_WEIGHTS, config=TINY_CONFIG, seed=0)
        assert report2.final_loss == report.final_loss
        assert np.array_equal(traj2.mean, traj.mean)
        traj3, _, _, report3 = g.fit(obs, bundle.chain, rig,
                                     weights=TINY_WEIGHTS, config=TINY_CONFIG, seed=1)
        assert report3.final_loss != report.final_loss

    def test_report_round_trip(self, tiny_fit):
        *_, report = tiny_fit
        doc = report.to_dict()
        assert "wall_time" not in doc
        assert doc["final_loss"] == report.final_loss
        assert report.to_dict(include_timing=True)["wall_time"] > 0

    def test_persistent_nonfinite_loss_raises(self):
        import dataclasses
        bundle, obs, rig = tiny_trial()
        # keypoints large enough to overflow the squared residual
        broken = dataclasses.replace(obs, kp=np.full_like(obs.kp, 1e200))
        with pytest.raises(FitFailure), np.errstate(all="ignore"):
            import warnings
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                g.fit(broken, bundle.chain, rig,
                      weights=TINY_WEIGHTS, config=TINY_CONFIG, seed=0)


class TestLossValues:
    def test_breakdown_sums_to_total(self, tiny_fit):
        bundle, obs, rig, traj, offsets, noise, _ = tiny_fit
        w = LossWeights(n_iter=100, mc_draws=2)
        total, breakdown = total_loss(traj, bundle.chain, offsets, rig, obs,
                                      noise, w, iteration=100, seed=3)
        assert np.isfinite(total)
        parts = [v for k, v in breakdown.items() if k != "total"]
        assert total == pytest.approx(sum(parts), rel=1e-12)

    def test_nll_and_ece_are_finite(self, tiny_fit):
        bundle, obs, rig, traj, offsets, noise, _ = tiny_fit
        nll = keypoint_nll(traj, bundle.chain, offsets, rig, obs, noise, draws=4)
        assert np.isfinite(nll)
        ece = internal_ece(traj, bundle.chain, offsets, rig, obs, noise, draws=4)
        assert 0 <= ece <= 0.5

    def test_fit_improves_nll_over_init(self, tiny_fit):
        # the fitted trajectory should explain the keypoints far better
        # than a constant pose at the same noise model
        bundle, obs, rig, traj, offsets, noise, _ = tiny_fit
        flat = g.VariationalTrajectory(
            basis=traj.basis,
            mean=np.tile(traj.mean.mean(axis=0), (traj.mean.shape[0], 1)),
            factor=traj.factor, raw_diag=traj.raw_diag)
        good = keypoint_nll(traj, bundle.chain, offsets, rig, obs, noise, draws=4)
        bad = keypoint_nll(flat, bundle.chain, offsets, rig, obs, noise, draws=4)
        assert good < bad
