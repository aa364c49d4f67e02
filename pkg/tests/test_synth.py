"""Simulator behaviour: scenario validation, ground truth, rendering."""

import dataclasses

import numpy as np
import pytest

import gaitcal as g
from gaitcal.kinematics import fk_batch
from gaitcal.cameras import project_points
from gaitcal.synth import (JOINT_NAMES, MONITORED_JOINTS, GaitScenario,
                           ScenarioError, build_biped, build_rig,
                           fixture_names, load_fixture, load_scenario,
                           scenario_with_seed)


class TestScenario:
    def test_defaults_are_valid(self):
        scn = GaitScenario()
        assert scn.speed == pytest.approx(0.6 * 110.0 / 60.0)
        assert scn.stride_period == pytest.approx(120.0 / 110.0)

    @pytest.mark.parametrize("kwargs", [
        {"duration": 0.05},
        {"cadence": 0.0},
        {"step_length_mm": -1.0},
        {"outlier_rate": 0.6},
        {"n_cameras": 1},
        {"speed_ms": 2.0},
        {"occlusions": ((1.0, 0.5, (0,)),)},
        {"occlusions": ((1.0, 2.0, (9,)),)},
    ])
    def test_rejects_bad_parameters(self, kwargs):
        with pytest.raises(ScenarioError):
            GaitScenario(**kwargs)

    def test_consistent_speed_accepted(self):
        scn = GaitScenario(speed_ms=0.6 * 110.0 / 60.0)
        assert scn.speed == pytest.approx(scn.speed_ms)

    def test_round_trip(self, tmp_path):
        scn = GaitScenario(name="rt", occlusions=((1.0, 2.0, (0, 2)),),
                           outlier_rate=0.1, seed=7)
        again = GaitScenario.from_dict(scn.to_dict())
        assert again == scn
        p = tmp_path / "scn.json"
        scn.save(p)
        assert load_scenario(p) == scn

    def test_seed_override(self):
        scn = GaitScenario(seed=3)
        assert scenario_with_seed(scn, 9).seed == 9
        assert scn.seed == 3

    def test_bundled_fixtures_load(self):
        names = fixture_names()
        assert {"clean", "noisy", "occluded"} <= set(names)
        for name in names:
            scn = load_fixture(name)
            assert scn.name == name
        with pytest.raises(ScenarioError):
            load_fixture("no_such_fixture")


class TestGroundTruth:
    def test_frame_grid(self):
        bundle = g.generate_trajectory(GaitScenario())
        assert bundle.n_frames == 120
        assert np.allclose(np.diff(bundle.times), 1.0 / 20.0)
        assert bundle.q.shape == (120, 6 + len(JOINT_NAMES))

    def test_joints_respect_limits(self):
        chain = build_biped()
        bundle = g.generate_trajectory(GaitScenario())
        lo, hi = chain.joint_limits[:, 0], chain.joint_limits[:, 1]
        assert np.all(bundle.joint_series >= lo[None, :] - 1e-12)
        assert np.all(bundle.joint_series <= hi[None, :] + 1e-12)

    def test_overdriven_scenario_rejected(self):
        with pytest.raises(ScenarioError, match="limits"):
            g.generate_trajectory(GaitScenario(amplitude_scale=3.5))

    def test_stances_alternate_and_match_targets(self):
        bundle = g.generate_trajectory(GaitScenario())
        evs = bundle.stances
        assert len(evs) >= 8
        assert all(b.foot != a.foot for a, b in zip(evs, evs[1:]))
        xs = bundle.walkway.apply(bundle.stance_ref_heels)[:, 0] * 1000.0
        steps = [abs(b - a) for a, b in zip(xs, xs[1:])]
        assert np.mean(steps) == pytest.approx(bundle.step_targets["step_left"], rel=0.01)

    def test_asymmetry_splits_step_lengths(self):
        bundle = g.generate_trajectory(GaitScenario(asymmetry=1.3))
        assert bundle.step_targets["step_right"] > bundle.step_targets["step_left"]
        total = bundle.step_targets["step_right"] + bundle.step_targets["step_left"]
        assert total == pytest.approx(bundle.step_targets["stride"])

    def test_heel_reference_offset(self):
        with_off = g.generate_trajectory(GaitScenario(heel_offset_mm=25.0))
        shift = with_off.heel_ref - with_off.heel_model
        assert np.allclose(shift[..., 0], 0.025)
        assert np.allclose(shift[..., 1:], 0.0)

    def test_degenerate_scenario_warns(self):
        with pytest.warns(UserWarning, match="degenerate"):
            g.generate_trajectory(GaitScenario(amplitude_scale=0.0))


class TestRendering:
    def test_noiseless_matches_projection(self):
        bundle = g.generate_trajectory(GaitScenario(base_sigma=0.0))
        obs, rig = g.render_observations(bundle)
        sites, _ = fk_batch(bundle.chain, bundle.q)
        pixels, _ = project_points(rig, sites)
        assert np.allclose(obs.kp, np.transpose(pixels, (1, 0, 2, 3)))
        assert np.all(obs.score == 0.99)

    def test_rendering_is_deterministic(self):
        bundle = g.generate_trajectory(load_fixture("noisy"))
        a, _ = g.render_observations(bundle)
        b, _ = g.render_observations(bundle)
        assert np.array_equal(a.kp, b.kp)
        assert np.array_equal(a.score, b.score)
        c, _ = g.render_observations(bundle, seed=99)
        assert not np.array_equal(a.kp, c.kp)

    def test_scores_track_noise(self):
        # larger injected noise must map to lower confidence
        scn = dataclasses.replace(load_fixture("noisy"), outlier_rate=0.0)
        bundle = g.generate_trajectory(scn)
        obs, _ = g.render_observations(bundle)
        sig = bundle.noise_scales.ravel()
        score = obs.score.ravel()
        r = np.corrcoef(np.log(sig), score)[0, 1]
        assert r < -0.9

    def test_outliers_marked_and_low_score(self):
        scn = GaitScenario(outlier_rate=0.2, seed=1)
        bundle = g.generate_trajectory(scn)
        obs, _ = g.render_observations(bundle)
        frac = bundle.outlier_mask.mean()
        assert 0.15 < frac < 0.25
        assert obs.score[bundle.outlier_mask].max() <= 0.2

    def test_occlusion_hides_cameras(self):
        scn = GaitScenario(occlusions=((1.0, 2.0, (0, 2)),))
        bundle = g.generate_trajectory(scn)
        obs, _ = g.render_observations(bundle)
        window = (bundle.times >= 1.0) & (bundle.times <= 2.0)
        assert not obs.vis[window][:, [0, 2], :].any()
        assert obs.vis[window][:, [1, 3], :].all()
        assert obs.vis[~window].all()

    def test_blackout_schedule_rejected(self):
        scn = GaitScenario(occlusions=((0.0, 6.0, (0, 1, 2)),))
        bundle = g.generate_trajectory(scn)
        with pytest.raises(ScenarioError, match="visible"):
            g.render_observations(bundle)

    def test_rig_sees_whole_walkway(self):
        scn = GaitScenario()
        rig = build_rig(scn)
        assert len(rig) == scn.n_cameras
        bundle = g.generate_trajectory(scn)
        sites, _ = fk_batch(bundle.chain, bundle.q)
        pixels, depths = project_points(rig, sites)
        assert np.all(depths > 0.1)
        assert np.all(pixels[..., 0] > 0) and np.all(pixels[..., 0] < scn.image_width)
        assert np.all(pixels[..., 1] > 0) and np.all(pixels[..., 1] < scn.image_height)


class TestChain:
    def test_biped_layout(self):
        chain = build_biped()
        assert chain.n_joints == len(JOINT_NAMES)
        assert set(MONITORED_JOINTS) <= set(JOINT_NAMES)
        for site in ("l_heel", "r_heel", "pelvis_c"):
            assert site in chain.site_names
