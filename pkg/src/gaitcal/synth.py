"""Synthetic gait simulator: ground-truth trajectories and noisy observations.

The walker is an 11-segment biped (pelvis root, torso, head, two legs with
thigh/shank/foot/toe) walking along +x on the ground plane z=0.  Joint
waveforms are built from at most three harmonics of the stride frequency
and are phase-locked so that each heel is momentarily stationary at
mid-stance.  Because every leg waveform and its time derivative vanish at
the owning leg's mid-stance instants, the heel x position there equals
pelvis x plus a constant, hence consecutive mid-stance heel separations
reproduce the requested step and stride lengths exactly.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, fields as dataclass_fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cameras import Camera, CameraRig, ObservationSet, project_points, rot_to_quat
from .gait import StancePhase, WalkwayFrame, detect_stance
from .kinematics import KinematicChain, fk_batch
from .trajectory import softplus_inv

# segment geometry (metres)
TRUNK_L = 0.20
NECK_L = 0.45
HEAD_L = 0.12
HIP_HALF_WIDTH = 0.10
THIGH_L = 0.45
SHANK_L = 0.45
HEEL_BACK = 0.07
HEEL_DROP = 0.05
FOOT_FWD = 0.13
TOE_L = 0.05

# hip-to-heel vertical lever at rest; sets the hip amplitude that freezes
# the heel at mid-stance
LEG_LEVER = THIGH_L + SHANK_L + HEEL_DROP

JOINT_NAMES = (
    "torso", "head",
    "l_hip", "l_knee", "l_ankle", "l_toe",
    "r_hip", "r_knee", "r_ankle", "r_toe",
)
MONITORED_JOINTS = ("l_hip", "l_knee", "l_ankle", "l_toe", "r_hip", "r_knee", "r_ankle", "r_toe")

SCORE_SLOPE = 7.0       # generator score family: s = 1 - (softplus_inv(sigma) - b)/SCORE_SLOPE
SCORE_CENTER = 0.7      # score assigned to a keypoint at exactly the base noise level
SCORE_JITTER = 0.03

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class GaitScenario:
    """Parameters of one synthetic walking trial."""

    name: str = "custom"
    duration: float = 6.0          # s
    rate: float = 20.0             # Hz
    cadence: float = 110.0         # steps/min
    step_length_mm: float = 600.0  # mean step target
    asymmetry: float = 1.0         # right/left step-length ratio
    amplitude_scale: float = 1.0   # scales all joint waveforms
    speed_ms: Optional[float] = None  # must agree with cadence*step if given
    n_cameras: int = 4
    image_width: int = 1280
    image_height: int = 720
    focal: float = 800.0
    base_sigma: float = 2.0        # px; 0 means exact projections
    score_coupling: float = 0.0    # iid log-noise spread reflected in scores
    temporal_coupling: float = 0.0  # smooth per-camera log-noise envelope
    outlier_rate: float = 0.0
    occlusions: Tuple[Tuple[float, float, Tuple[int, ...]], ...] = ()
    heel_offset_mm: float = 0.0    # anterior shift of reference heels
    seed: int = 0

    def __post_init__(self):
        if self.duration * self.rate < 2:
            raise ScenarioError("trial must contain at least 2 frames")
        for name in ("rate", "cadence", "step_length_mm", "asymmetry", "focal"):
            if getattr(self, name) <= 0:
                raise ScenarioError(f"{name} must be positive")
        if self.amplitude_scale < 0 or self.base_sigma < 0:
            raise ScenarioError("amplitude_scale and base_sigma must be nonnegative")
        if not 0 <= self.outlier_rate <= 0.5:
            raise ScenarioError("outlier_rate must be in [0, 0.5]")
        if self.score_coupling < 0 or self.temporal_coupling < 0:
            raise ScenarioError("score couplings must be nonnegative")
        if self.n_cameras < 2:
            raise ScenarioError("need at least 2 cameras")
        derived = (self.step_length_mm / 1000.0) * self.cadence / 60.0
        if self.speed_ms is not None and abs(self.speed_ms - derived) > 1e-9:
            raise ScenarioError(
                f"speed_ms={self.speed_ms} conflicts with cadence*step ({derived:.6f} m/s)"
            )
        for win in self.occlusions:
            t0, t1, cams = win
            if not t0 < t1:
                raise ScenarioError(f"occlusion window {win} is empty")
            if any(not 0 <= c < self.n_cameras for c in cams):
                raise ScenarioError(f"occlusion window {win} names an unknown camera")

    @property
    def speed(self) -> float:
        """Progression speed in m/s."""
        return (self.step_length_mm / 1000.0) * self.cadence / 60.0

    @property
    def stride_period(self) -> float:
        return 120.0 / self.cadence

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "duration": self.duration,
            "rate": self.rate,
            "cadence": self.cadence,
            "step_length_mm": self.step_length_mm,
            "asymmetry": self.asymmetry,
            "amplitude_scale": self.amplitude_scale,
            "speed_ms": self.speed_ms,
            "n_cameras": self.n_cameras,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "focal": self.focal,
            "base_sigma": self.base_sigma,
            "score_coupling": self.score_coupling,
            "temporal_coupling": self.temporal_coupling,
            "outlier_rate": self.outlier_rate,
            "occlusions": [[t0, t1, list(cams)] for t0, t1, cams in self.occlusions],
            "heel_offset_mm": self.heel_offset_mm,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "GaitScenario":
        occl = tuple((float(t0), float(t1), tuple(int(c) for c in cams)) for t0, t1, cams in d.get("occlusions", ()))
        known = {f.name for f in dataclass_fields(GaitScenario)} - {"occlusions"}
        return GaitScenario(occlusions=occl, **{k: v for k, v in d.items() if k in known})

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_scenario(path) -> GaitScenario:
    with open(path) as fh:
        return GaitScenario.from_dict(json.load(fh))


def build_biped() -> KinematicChain:
    """11-segment walker with one sagittal revolute joint per non-root segment."""
    y = (0.0, 1.0, 0.0)
    segs = [
        # name, parent, offset, limits
        ("pelvis", -1, (0, 0, 0), None),
        ("torso", 0, (0, 0, TRUNK_L), (-0.5, 0.5)),
        ("head", 1, (0, 0, NECK_L), (-0.7, 0.7)),
        ("l_thigh", 0, (0, HIP_HALF_WIDTH, 0), (-1.2, 1.2)),
        ("l_shank", 3, (0, 0, -THIGH_L), (-0.05, 2.2)),
        ("l_foot", 4, (0, 0, -SHANK_L), (-0.8, 0.8)),
        ("l_toe", 5, (FOOT_FWD, 0, -HEEL_DROP), (-0.9, 0.9)),
        ("r_thigh", 0, (0, -HIP_HALF_WIDTH, 0), (-1.2, 1.2)),
        ("r_shank", 7, (0, 0, -THIGH_L), (-0.05, 2.2)),
        ("r_foot", 8, (0, 0, -SHANK_L), (-0.8, 0.8)),
        ("r_toe", 9, (FOOT_FWD, 0, -HEEL_DROP), (-0.9, 0.9)),
    ]
    sites = [
        ("pelvis_c", 0, (0, 0, 0)),
        ("chest", 1, (0, 0, NECK_L * 0.55)),
        ("head_top", 2, (0, 0, HEAD_L)),
        ("l_knee", 4, (0, 0, 0)),
        ("l_ankle", 5, (0, 0, 0)),
        ("l_heel", 5, (-HEEL_BACK, 0, -HEEL_DROP)),
        ("l_toe_tip", 6, (TOE_L, 0, 0)),
        ("r_knee", 8, (0, 0, 0)),
        ("r_ankle", 9, (0, 0, 0)),
        ("r_heel", 9, (-HEEL_BACK, 0, -HEEL_DROP)),
        ("r_toe_tip", 10, (TOE_L, 0, 0)),
    ]
    return KinematicChain(
        names=tuple(s[0] for s in segs),
        parents=np.array([s[1] for s in segs], dtype=np.int64),
        offsets=np.array([s[2] for s in segs], dtype=np.float64),
        axes=np.array([y] * len(segs), dtype=np.float64),
        joint_limits=np.array([s[3] for s in segs[1:]], dtype=np.float64),
        site_names=tuple(s[0] for s in sites),
        site_seg=np.array([s[1] for s in sites], dtype=np.int64),
        site_loc=np.array([s[2] for s in sites], dtype=np.float64),
    )


def build_rig(scenario: GaitScenario) -> CameraRig:
    """Ring of inward-looking cameras around the walkway."""
    span = scenario.speed * scenario.duration
    center = np.array([0.5 + span / 2.0, 0.0, 1.0])
    radius = span / 2.0 + 2.8
    cams = []
    for i in range(scenario.n_cameras):
        ang = 2 * np.pi * i / scenario.n_cameras + np.deg2rad(37.0)
        pos = center + np.array([radius * np.cos(ang), radius * np.sin(ang), 0.8])
        fwd = center - pos
        fwd = fwd / np.linalg.norm(fwd)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        cams.append(
            Camera(
                name=f"cam{i}",
                fx=scenario.focal,
                fy=scenario.focal,
                cx=scenario.image_width / 2.0,
                cy=scenario.image_height / 2.0,
                quat=rot_to_quat(r),
                trans=-r @ pos,
            )
        )
    return CameraRig(cameras=tuple(cams))


class _WaveModel:
    """Analytic joint waveforms for one scenario, evaluable at any time."""

    # fixed waveform amplitudes (radians), scaled by scenario.amplitude_scale
    KNEE_AMP = 1.1
    ANKLE_AMP = 0.35
    TOE_AMP = 0.35
    TORSO_AMP = 0.05
    HEAD_AMP = 0.03
    SWAY_AMP = 0.025

    def __init__(self, scenario: GaitScenario, chain: KinematicChain):
        self.scenario = scenario
        self.chain = chain
        self.v = scenario.speed
        self.omega = 2 * np.pi / scenario.stride_period
        r = scenario.asymmetry
        # phase gap between left and right mid-stances encodes the
        # right/left step-length ratio
        self.delta = np.pi * (1 - r) / (1 + r)
        self.t_ms0 = 0.35 * scenario.stride_period  # first left mid-stance
        self.x0 = 0.5
        self.hip_amp = self.v / (self.omega * LEG_LEVER) * scenario.amplitude_scale
        s = scenario.amplitude_scale
        self.knee_amp = self.KNEE_AMP * s
        self.ankle_amp = self.ANKLE_AMP * s
        self.toe_amp = self.TOE_AMP * s
        self.z_base = 0.0
        self.z_base = self._ground_base()

    def _leg(self, phase: np.ndarray) -> Tuple[np.ndarray, ...]:
        bump = ((1 - np.cos(phase)) / 2) ** 2
        hip = self.hip_amp * np.sin(phase)
        knee = self.knee_amp * bump
        ankle = self.ankle_amp * np.sin(2 * phase) * (1 - np.cos(phase)) / 2
        toe = self.toe_amp * bump
        return hip, knee, ankle, toe

    def q(self, times: np.ndarray) -> np.ndarray:
        t = np.asarray(times, dtype=np.float64)
        scn = self.scenario
        phase_l = self.omega * (t - self.t_ms0)
        phase_r = phase_l + np.pi + self.delta
        q = np.zeros((t.shape[0], self.chain.dof))
        q[:, 0] = self.x0 + self.v * t
        q[:, 1] = self.SWAY_AMP * scn.amplitude_scale * np.sin(phase_l)
        q[:, 2] = self.z_base
        q[:, 6] = self.TORSO_AMP * scn.amplitude_scale * np.sin(2 * phase_l + 0.4)
        q[:, 7] = self.HEAD_AMP * scn.amplitude_scale * np.sin(2 * phase_l + 1.1)
        q[:, 8:12] = np.stack(self._leg(phase_l), axis=1)
        q[:, 12:16] = np.stack(self._leg(phase_r), axis=1)
        return q

    def heel_positions(self, times: np.ndarray) -> np.ndarray:
        """Model heel world positions, shape (T, 2, 3); index 0 left, 1 right."""
        sites, _ = fk_batch(self.chain, self.q(times))
        il = self.chain.site_index("l_heel")
        ir = self.chain.site_index("r_heel")
        return np.stack([sites[:, il, :], sites[:, ir, :]], axis=1)

    def _ground_base(self) -> float:
        # place the lowest heel pass 2 mm above the ground plane
        dense = np.arange(0.0, self.scenario.duration, 1.0 / (self.scenario.rate * 10))
        heels = self.heel_positions(dense)
        return float(-heels[..., 2].min() + 0.002)


@dataclass
class GroundTruthBundle:
    """Everything the simulator knows about one trial."""

    scenario: GaitScenario
    chain: KinematicChain
    times: np.ndarray            # (T,)
    q: np.ndarray                # (T, D) root pose + joint angles
    heel_model: np.ndarray       # (T, 2, 3) model heel positions
    heel_ref: np.ndarray         # (T, 2, 3) reference (pressure-point) heels
    stances: List[StancePhase]
    stance_ref_heels: np.ndarray  # (E, 3) reference heel at each heel-center
    walkway: WalkwayFrame
    step_targets: Dict[str, float]  # mm
    noise_scales: Optional[np.ndarray] = None   # (T, C, K) px, set by render
    outlier_mask: Optional[np.ndarray] = None   # (T, C, K) bool, set by render

    @property
    def joint_series(self) -> np.ndarray:
        return self.q[:, 6:]

    @property
    def n_frames(self) -> int:
        return self.times.shape[0]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario.to_dict(),
            "joint_names": list(JOINT_NAMES),
            "times": self.times.tolist(),
            "q": self.q.tolist(),
            "heel_ref": self.heel_ref.tolist(),
            "stances": [s.to_dict() for s in self.stances],
            "stance_ref_heels": self.stance_ref_heels.tolist(),
            "walkway": self.walkway.to_dict(),
            "step_targets": self.step_targets,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")


def generate_trajectory(scenario: GaitScenario) -> GroundTruthBundle:
    """Build the ground-truth trial for a scenario.

    Rejects parameter sets whose waveforms violate the chain's joint
    limits.  Emits a warning (not an error) when the scenario produces no
    stance phases, e.g. with amplitude_scale=0.
    """
    chain = build_biped()
    wave = _WaveModel(scenario, chain)
    n_frames = int(round(scenario.duration * scenario.rate))
    times = np.arange(n_frames) / scenario.rate
    q = wave.q(times)

    lo, hi = chain.joint_limits[:, 0], chain.joint_limits[:, 1]
    joints = q[:, 6:]
    bad = (joints < lo[None, :] - 1e-12) | (joints > hi[None, :] + 1e-12)
    if bad.any():
        j = int(np.argwhere(bad.any(axis=0))[0][0])
        raise ScenarioError(
            f"waveform for joint {JOINT_NAMES[j]!r} exceeds its limits "
            f"[{lo[j]:.3f}, {hi[j]:.3f}]; reduce amplitude_scale, step length or cadence"
        )

    heel_model = wave.heel_positions(times)
    offset = np.array([scenario.heel_offset_mm / 1000.0, 0.0, 0.0])
    heel_ref = heel_model + offset[None, None, :]

    # truth stance events from a 10x oversampled grid
    dense = np.arange(0.0, times[-1] + 1e-9, 1.0 / (scenario.rate * 10))
    heel_dense = wave.heel_positions(dense)
    stances: List[StancePhase] = []
    for fi, foot in enumerate(("left", "right")):
        stances.extend(detect_stance(dense, heel_dense[:, fi, :], foot, source="simulator"))
    stances.sort(key=lambda s: s.heel_center)
    if not stances:
        warnings.warn(f"scenario {scenario.name!r} is degenerate: no stance phases detected")

    if stances:
        centers = np.array([s.heel_center for s in stances])
        feet = [s.foot for s in stances]
        heel_at = wave.heel_positions(centers)
        stance_ref = np.stack(
            [heel_at[i, 0 if f == "left" else 1, :] + offset for i, f in enumerate(feet)]
        )
        mean_y = float(stance_ref[:, 1].mean())
    else:
        stance_ref = np.zeros((0, 3))
        mean_y = 0.0

    walkway = WalkwayFrame(origin=np.array([0.0, mean_y]), direction=np.array([1.0, 0.0]))
    v, period = scenario.speed, scenario.stride_period
    delta = wave.delta
    targets = {
        "stride": v * period * 1000.0,
        "step_right": v * period * (np.pi - delta) / (2 * np.pi) * 1000.0,
        "step_left": v * period * (np.pi + delta) / (2 * np.pi) * 1000.0,
    }
    return GroundTruthBundle(
        scenario=scenario,
        chain=chain,
        times=times,
        q=q,
        heel_model=heel_model,
        heel_ref=heel_ref,
        stances=stances,
        stance_ref_heels=stance_ref,
        walkway=walkway,
        step_targets=targets,
    )


def _noise_envelope(scenario: GaitScenario, times: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Smooth unit-RMS log-noise envelope per camera, shape (C, T)."""
    c = scenario.n_cameras
    env = np.zeros((c, times.shape[0]))
    for ci in range(c):
        freqs = rng.uniform(0.15, 0.6, size=3)
        phases = rng.uniform(0, 2 * np.pi, size=3)
        amps = rng.uniform(0.5, 1.5, size=3)
        amps = amps / np.sqrt((amps**2).sum() / 2.0)
        for f, p, a in zip(freqs, phases, amps):
            env[ci] += a * np.sin(2 * np.pi * f * times + p)
    return env


def render_observations(bundle: GroundTruthBundle, rig: Optional[CameraRig] = None, seed: Optional[int] = None) -> Tuple[ObservationSet, CameraRig]:
    """Project the true trial through a camera rig and corrupt it.

    Adds heteroscedastic pixel noise whose magnitude is reflected in the
    confidence scores through an inverse noise-family map, plus optional
    uniform in-frame outliers at low scores and scheduled occlusions.
    With base_sigma=0 the returned keypoints equal the exact projections.
    """
    scenario = bundle.scenario
    if seed is None:
        seed = scenario.seed
    if rig is None:
        rig = build_rig(scenario)
    chain, q, times = bundle.chain, bundle.q, bundle.times
    n_t, n_c, n_k = times.shape[0], len(rig.cameras), chain.n_sites

    sites, _ = fk_batch(chain, q)
    pixels, depths = project_points(rig, sites)  # (C, T, K, 2), (C, T, K)
    if (depths <= 1e-6).any():
        bad = int(np.argwhere((depths <= 1e-6).any(axis=(1, 2)))[0][0])
        raise ScenarioError(f"camera {rig.cameras[bad].name} has the subject behind it; move the rig")
    kp = np.transpose(pixels, (1, 0, 2, 3)).copy()  # (T, C, K, 2)

    if scenario.base_sigma == 0.0:
        sig = np.zeros((n_t, n_c, n_k))
        score = np.full((n_t, n_c, n_k), 0.99)
        outlier = np.zeros((n_t, n_c, n_k), dtype=bool)
    else:
        env = _noise_envelope(scenario, times, np.random.default_rng([seed, 11]))
        xi = np.random.default_rng([seed, 12]).standard_normal((n_t, n_c, n_k))
        log_sig = (
            np.log(scenario.base_sigma)
            + scenario.score_coupling * xi
            + scenario.temporal_coupling * env.T[:, :, None]
        )
        sig = np.exp(log_sig)
        kp += sig[..., None] * np.random.default_rng([seed, 13]).standard_normal(kp.shape)

        b_gen = softplus_inv(scenario.base_sigma) - (1 - SCORE_CENTER) * SCORE_SLOPE
        score = 1.0 - (softplus_inv(np.maximum(sig, 1e-6)) - b_gen) / SCORE_SLOPE
        score += SCORE_JITTER * np.random.default_rng([seed, 14]).standard_normal(score.shape)
        score = np.clip(score, 0.01, 0.999)

        rng_out = np.random.default_rng([seed, 15])
        outlier = rng_out.uniform(size=(n_t, n_c, n_k)) < scenario.outlier_rate
        n_out = int(outlier.sum())
        if n_out:
            kp[outlier, 0] = rng_out.uniform(0, scenario.image_width, size=n_out)
            kp[outlier, 1] = rng_out.uniform(0, scenario.image_height, size=n_out)
            score[outlier] = rng_out.uniform(0.02, 0.2, size=n_out)

    vis = np.ones((n_t, n_c, n_k), dtype=bool)
    for t0, t1, cams in scenario.occlusions:
        frames = (times >= t0) & (times <= t1)
        for c in cams:
            vis[frames, c, :] = False
    cams_per_frame = vis.any(axis=2).sum(axis=1)
    if cams_per_frame.mean() < 2.0:
        raise ScenarioError("occlusion schedule leaves fewer than 2 visible cameras per frame on average")

    obs = ObservationSet(times=times, rate=scenario.rate, kp=kp, score=score, vis=vis)
    bundle.noise_scales = sig
    bundle.outlier_mask = outlier
    return obs, rig


_FIXTURE_DIR = Path(__file__).parent / "fixtures"


def fixture_names() -> List[str]:
    return sorted(p.stem for p in _FIXTURE_DIR.glob("*.json"))


def load_fixture(name: str) -> GaitScenario:
    """Load one of the canonical scenarios shipped with the package."""
    path = _FIXTURE_DIR / f"{name}.json"
    if not path.exists():
        raise ScenarioError(f"unknown fixture {name!r}; available: {fixture_names()}")
    return load_scenario(path)


def scenario_with_seed(scenario: GaitScenario, seed: int) -> GaitScenario:
    return replace(scenario, seed=seed)
