"""Pinhole multi-camera rig and 2D keypoint observations.

Cameras are parameterized by intrinsics (fx, fy, cx, cy) and a rigid
world-to-camera transform stored as a unit quaternion plus translation:
X_cam = R @ X_world + t. Observations hold per-frame, per-camera keypoints
with detector confidence scores and a visibility mask; occluded keypoints
are absent (masked), not zero-scored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "BehindCameraError",
    "Camera",
    "CameraRig",
    "ObservationSet",
    "project",
    "project_points",
    "quat_to_rot",
    "triangulate_point",
    "load_rig",
    "rig_to_dict",
    "save_observations",
    "load_observations",
]


class BehindCameraError(RuntimeError):
    """A point has nonpositive depth in a camera frame."""

    def __init__(self, camera: int, frame=None):
        self.camera = camera
        self.frame = frame
        where = f" at frame {frame}" if frame is not None else ""
        super().__init__(f"point behind camera {camera}{where}")


def rot_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix."""
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


def quat_to_rot(quat: np.ndarray) -> np.ndarray:
    """Rotation matrix from a unit quaternion (w, x, y, z)."""
    w, x, y, z = quat
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    quat: np.ndarray  # (w, x, y, z), unit norm
    trans: np.ndarray  # [3] world-to-camera translation [m]
    name: str = "cam"

    def __post_init__(self):
        object.__setattr__(self, "quat", np.asarray(self.quat, dtype=np.float64))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=np.float64))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if abs(np.linalg.norm(self.quat) - 1.0) > 1e-9:
            raise ValueError("quaternion must have unit norm")

    @property
    def rot(self) -> np.ndarray:
        return quat_to_rot(self.quat)


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        if len(self.cameras) < 2:
            raise ValueError("a rig needs at least 2 cameras")

    def __len__(self) -> int:
        return len(self.cameras)

    def rotations(self) -> np.ndarray:
        return np.stack([c.rot for c in self.cameras])

    def translations(self) -> np.ndarray:
        return np.stack([c.trans for c in self.cameras])


def project(rig: CameraRig, camera: int, point, frame=None) -> np.ndarray:
    """Project one world point to pixel coordinates in the chosen camera."""
    cam = rig.cameras[camera]
    p = cam.rot @ np.asarray(point, dtype=np.float64) + cam.trans
    if p[2] <= 0:
        raise BehindCameraError(camera, frame)
    return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])


def project_points(rig: CameraRig, points: np.ndarray):
    """Project [..., 3] world points through every camera.

    Returns (pixels [C, ..., 2], depths [C, ...]); callers decide how to
    treat nonpositive depths.
    """
    points = np.asarray(points, dtype=np.float64)
    pixels = []
    depths = []
    for cam in rig.cameras:
        p = points @ cam.rot.T + cam.trans
        z = p[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = cam.fx * p[..., 0] / z + cam.cx
            py = cam.fy * p[..., 1] / z + cam.cy
        pixels.append(np.stack([px, py], axis=-1))
        depths.append(z)
    return np.stack(pixels), np.stack(depths)


def triangulate_point(rig: CameraRig, pixels: np.ndarray, weights=None) -> np.ndarray:
    """Linear (DLT) triangulation of one point seen by all cameras.

    pixels: [C,2]; weights: optional per-camera nonnegative weights. Rows with
    weight 0 are excluded. Used for initialization, not for inference.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    c = len(rig)
    if weights is None:
        weights = np.ones(c)
    rows = []
    for i, cam in enumerate(rig.cameras):
        if weights[i] <= 0:
            continue
        r, t = cam.rot, cam.trans
        u = (pixels[i, 0] - cam.cx) / cam.fx
        v = (pixels[i, 1] - cam.cy) / cam.fy
        # u * (r3 X + t3) = r1 X + t1, likewise for v
        rows.append(weights[i] * (u * np.append(r[2], t[2]) - np.append(r[0], t[0])))
        rows.append(weights[i] * (v * np.append(r[2], t[2]) - np.append(r[1], t[1])))
    a = np.stack(rows)
    _, _, vh = np.linalg.svd(a)
    h = vh[-1]
    if abs(h[3]) < 1e-12:
        raise np.linalg.LinAlgError("degenerate triangulation")
    return h[:3] / h[3]


@dataclass(frozen=True)
class ObservationSet:
    """Per-frame, per-camera 2D keypoints with scores and visibility."""

    times: np.ndarray  # [T] seconds, strictly increasing
    rate: float  # frames per second
    kp: np.ndarray  # [T,C,K,2] pixels
    score: np.ndarray  # [T,C,K] in [0,1]
    vis: np.ndarray  # [T,C,K] bool

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=np.float64))
        object.__setattr__(self, "kp", np.asarray(self.kp, dtype=np.float64))
        object.__setattr__(self, "score", np.asarray(self.score, dtype=np.float64))
        object.__setattr__(self, "vis", np.asarray(self.vis, dtype=bool))
        t, c, k = self.score.shape
        if self.kp.shape != (t, c, k, 2) or self.vis.shape != (t, c, k):
            raise ValueError("keypoint, score, and visibility shapes disagree")
        if self.times.shape != (t,):
            raise ValueError("times must have one entry per frame")
        if t > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("frame timestamps must be strictly increasing")
        s = self.score[self.vis]
        if s.size and (s.min() < 0 or s.max() > 1):
            raise ValueError("scores must lie in [0,1]")

    @property
    def n_frames(self) -> int:
        return self.kp.shape[0]

    @property
    def n_cameras(self) -> int:
        return self.kp.shape[1]

    @property
    def n_keypoints(self) -> int:
        return self.kp.shape[2]


def save_observations(obs: ObservationSet, path) -> None:
    """JSON-lines, one record per (frame, camera); header row carries the rate."""
    with open(Path(path), "w") as f:
        f.write(json.dumps({"schema_version": 1, "rate": obs.rate, "n_frames": obs.n_frames,
                            "n_cameras": obs.n_cameras, "n_keypoints": obs.n_keypoints},
                           sort_keys=True) + "\n")
        for t in range(obs.n_frames):
            for c in range(obs.n_cameras):
                rec = {
                    "t": obs.times[t],
                    "cam": c,
                    "kp": [[float(x), float(y)] for x, y in obs.kp[t, c]],
                    "score": [float(s) for s in obs.score[t, c]],
                    "vis": [int(v) for v in obs.vis[t, c]],
                }
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_observations(path) -> ObservationSet:
    with open(Path(path)) as f:
        header = json.loads(f.readline())
        t_n, c_n, k_n = header["n_frames"], header["n_cameras"], header["n_keypoints"]
        times = np.zeros(t_n)
        kp = np.zeros((t_n, c_n, k_n, 2))
        score = np.zeros((t_n, c_n, k_n))
        vis = np.zeros((t_n, c_n, k_n), dtype=bool)
        seen_t: dict[float, int] = {}
        for line in f:
            rec = json.loads(line)
            t_val = rec["t"]
            if t_val not in seen_t:
                seen_t[t_val] = len(seen_t)
            ti = seen_t[t_val]
            ci = rec["cam"]
            times[ti] = t_val
            kp[ti, ci] = rec["kp"]
            score[ti, ci] = rec["score"]
            vis[ti, ci] = np.asarray(rec["vis"], dtype=bool)
    return ObservationSet(times=times, rate=header["rate"], kp=kp, score=score, vis=vis)


def rig_to_dict(rig: CameraRig) -> dict:
    return {
        "schema_version": 1,
        "cameras": [
            {"name": c.name, "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
             "quat": list(c.quat), "trans": list(c.trans)}
            for c in rig.cameras
        ],
    }


def load_rig(path) -> CameraRig:
    with open(Path(path)) as f:
        doc = json.load(f)
    return rig_from_dict(doc)


def rig_from_dict(doc: dict) -> CameraRig:
    cams = tuple(
        Camera(fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
               quat=np.array(c["quat"]), trans=np.array(c["trans"]),
               name=c.get("name", f"cam{i}"))
        for i, c in enumerate(doc["cameras"])
    )
    return CameraRig(cameras=cams)
