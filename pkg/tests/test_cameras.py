import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gaitcal.cameras import (BehindCameraError, Camera, CameraRig,
                             ObservationSet, load_observations, project,
                             project_points, quat_to_rot, rig_from_dict,
                             rig_to_dict, rot_to_quat, save_observations,
                             triangulate_point)
from gaitcal.synth import build_rig, load_fixture


def small_rig() -> CameraRig:
    """Three inward-looking cameras on a ring around the origin."""
    cams = []
    center = np.array([0.0, 0.0, 1.2])
    for k, az in enumerate((0.0, 2.1, 4.2)):
        pos = np.array([3.0 * np.cos(az), 3.0 * np.sin(az), 1.8])
        fwd = center - pos
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, [0.0, 0.0, 1.0])
        right = right / np.linalg.norm(right)
        r = np.stack([right, np.cross(fwd, right), fwd])
        cams.append(Camera(fx=800.0, fy=820.0, cx=640.0, cy=360.0,
                           quat=rot_to_quat(r), trans=-r @ pos, name=f"cam{k}"))
    return CameraRig(cameras=tuple(cams))


class TestRotations:
    def test_quat_round_trip_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            r = Rotation.random(random_state=rng).as_matrix()
            back = quat_to_rot(rot_to_quat(r))
            assert np.max(np.abs(back - r)) < 1e-12

    def test_quat_normalized(self):
        r = Rotation.from_euler("xyz", [3.1, 0.01, -3.0]).as_matrix()
        q = rot_to_quat(r)
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12


class TestProjection:
    def test_known_pinhole_point(self):
        cam = Camera(fx=100.0, fy=200.0, cx=320.0, cy=240.0,
                     quat=np.array([1.0, 0.0, 0.0, 0.0]),
                     trans=np.zeros(3))
        rig = CameraRig(cameras=(cam, small_rig().cameras[0]))
        # identity pose: camera at origin looking down +z of its own frame
        px = project(rig, 0, np.array([0.1, -0.2, 2.0]))
        assert np.allclose(px, [320.0 + 100.0 * 0.05, 240.0 - 200.0 * 0.1])

    def test_behind_camera_raises_with_index(self):
        rig = small_rig()
        cam = rig.cameras[1]
        # recover the camera position, then step past it away from the scene
        pos = -quat_to_rot(cam.quat).T @ cam.trans
        center = np.array([0.0, 0.0, 1.2])
        behind = pos + (pos - center)
        with pytest.raises(BehindCameraError) as err:
            project(rig, 1, behind)
        assert err.value.camera == 1

    def test_triangulation_round_trip(self):
        rig = small_rig()
        rng = np.random.default_rng(3)
        for _ in range(20):
            p = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                          rng.uniform(0.8, 2.0)])
            px = np.stack([project(rig, c, p) for c in range(len(rig))])
            back = triangulate_point(rig, px)
            assert np.max(np.abs(back - p)) < 1e-9

    def test_triangulation_weights_downweight_bad_view(self):
        rig = small_rig()
        p = np.array([0.2, -0.1, 1.4])
        px = np.stack([project(rig, c, p) for c in range(len(rig))])
        px_bad = px.copy()
        px_bad[2] += 40.0  # corrupt one view
        w = np.array([1.0, 1.0, 1e-6])
        back = triangulate_point(rig, px_bad, weights=w)
        assert np.linalg.norm(back - p) < 1e-3

    def test_project_points_matches_project(self):
        rig = small_rig()
        rng = np.random.default_rng(5)
        pts = np.column_stack([rng.uniform(-0.5, 0.5, 4), rng.uniform(-0.5, 0.5, 4),
                               rng.uniform(1.0, 2.0, 4)])
        all_px, depths = project_points(rig, pts)
        assert all_px.shape == (len(rig), 4, 2)
        assert np.all(depths > 0)
        for c in range(len(rig)):
            for i in range(4):
                assert np.allclose(all_px[c, i], project(rig, c, pts[i]))


class TestSerialization:
    def test_rig_round_trip(self):
        rig = small_rig()
        again = rig_from_dict(rig_to_dict(rig))
        assert [c.name for c in again.cameras] == [c.name for c in rig.cameras]
        p = np.array([0.1, 0.2, 1.1])
        for c in range(len(rig)):
            assert np.allclose(project(again, c, p), project(rig, c, p), atol=1e-12)

    def test_observations_round_trip(self, tmp_path):
        from gaitcal.synth import generate_trajectory, render_observations

        scn = load_fixture("clean")
        bundle = generate_trajectory(scn)
        obs, _ = render_observations(bundle)
        save_observations(obs, tmp_path / "obs.jsonl")
        again = load_observations(tmp_path / "obs.jsonl")
        assert again.rate == obs.rate
        assert np.allclose(again.kp, obs.kp)
        assert np.allclose(again.score, obs.score)
        assert np.array_equal(again.vis, obs.vis)

    def test_observation_validation(self):
        with pytest.raises(ValueError):
            ObservationSet(times=np.arange(3.0), rate=20.0,
                           kp=np.zeros((3, 2, 4, 2)),
                           score=np.zeros((3, 2, 5)),  # wrong K
                           vis=np.ones((3, 2, 4), dtype=bool))


def test_build_rig_covers_walkway():
    scn = load_fixture("clean")
    rig = build_rig(scn)
    assert len(rig) == scn.n_cameras
    for cam in rig.cameras:
        r = quat_to_rot(cam.quat)
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-10)
