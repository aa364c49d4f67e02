"""Spatiotemporal gait metrics with posterior uncertainty.

Heel trajectories live in world coordinates (metres).  Metric values are
reported in millimetres in the walkway frame: x is progression, y is
lateral, z is height above the ground plane.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .calibration import spatial_pit
from .kinematics import KinematicChain, SiteOffsets, fk_batch
from .trajectory import VariationalTrajectory, sample_path

MM = 1000.0

# stance detector defaults: heel below 30 mm and slower than 0.2 m/s
# for at least 0.1 s counts as ground contact
HEIGHT_THRESH_M = 0.030
SPEED_THRESH_MS = 0.2
MIN_STANCE_S = 0.1


class GaitError(ValueError):
    pass


class AlignmentError(GaitError):
    pass


@dataclass(frozen=True)
class StancePhase:
    """One ground-contact interval of a single foot."""

    foot: str
    contact: float
    toe_off: float
    heel_center: float
    source: str = "detector"

    def __post_init__(self):
        if self.foot not in ("left", "right"):
            raise GaitError(f"foot must be 'left' or 'right', got {self.foot!r}")
        if not self.contact < self.toe_off:
            raise GaitError(
                f"stance interval is empty: contact={self.contact} toe_off={self.toe_off}"
            )
        if not (self.contact <= self.heel_center <= self.toe_off):
            raise GaitError("heel_center outside the stance interval")

    def to_dict(self) -> dict:
        return {
            "foot": self.foot,
            "contact": self.contact,
            "toe_off": self.toe_off,
            "heel_center": self.heel_center,
            "source": self.source,
        }

    @staticmethod
    def from_dict(d: dict) -> "StancePhase":
        return StancePhase(d["foot"], d["contact"], d["toe_off"], d["heel_center"], d.get("source", "detector"))


@dataclass(frozen=True)
class WalkwayFrame:
    """Planar frame whose x axis runs along the walking direction."""

    origin: np.ndarray   # (2,) ground-plane point
    direction: np.ndarray  # (2,) unit progression axis

    @property
    def angle(self) -> float:
        return float(np.arctan2(self.direction[1], self.direction[0]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) -> walkway-frame points (..., 3)."""
        points = np.asarray(points, dtype=np.float64)
        dx, dy = self.direction
        rel_x = points[..., 0] - self.origin[0]
        rel_y = points[..., 1] - self.origin[1]
        out = np.empty_like(points)
        out[..., 0] = dx * rel_x + dy * rel_y
        out[..., 1] = -dy * rel_x + dx * rel_y
        out[..., 2] = points[..., 2]
        return out

    def to_dict(self) -> dict:
        return {"origin": [float(v) for v in self.origin], "angle": self.angle}


def align_to_walkway(heel_points: np.ndarray) -> WalkwayFrame:
    """Fit the progression axis to a cloud of stance heel positions.

    Total-least-squares line through the ground-plane projection of the
    points; the axis is oriented from the first point toward the last so
    walkway x increases along progression.
    """
    pts = np.asarray(heel_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
        raise AlignmentError("need at least two 3-d heel points")
    xy = pts[:, :2]
    centroid = xy.mean(axis=0)
    centered = xy - centroid
    spread = np.abs(centered).max()
    if spread < 1e-9:
        raise AlignmentError("heel positions are coincident; walkway axis is undefined")
    # principal axis of the planar scatter
    cov = centered.T @ centered
    w, v = np.linalg.eigh(cov)
    direction = v[:, np.argmax(w)]
    if direction @ (xy[-1] - xy[0]) < 0:
        direction = -direction
    return WalkwayFrame(origin=centroid.copy(), direction=direction / np.linalg.norm(direction))


def step_length(prev_point, next_point, prev_foot: str, next_foot: str) -> float:
    """Lengthwise step length |dx| between opposite-foot heel points (walkway frame, mm)."""
    if prev_foot == next_foot:
        raise GaitError(f"step requires alternating feet, got {prev_foot!r} twice")
    return float(abs(np.asarray(next_point)[..., 0] - np.asarray(prev_point)[..., 0]))


def stride_length(point_a, point_b, foot_a: str, foot_b: str, mode: str = "lengthwise") -> float:
    """Stride length between successive same-foot heel points (walkway frame, mm)."""
    if foot_a != foot_b:
        raise GaitError(f"stride requires the same foot, got {foot_a!r} then {foot_b!r}")
    a = np.asarray(point_a, dtype=np.float64)
    b = np.asarray(point_b, dtype=np.float64)
    if mode == "lengthwise":
        return float(abs(b[..., 0] - a[..., 0]))
    if mode == "euclidean":
        return float(np.hypot(b[..., 0] - a[..., 0], b[..., 1] - a[..., 1]))
    raise GaitError(f"unknown stride mode {mode!r}")


@dataclass(frozen=True)
class GaitMetricSample:
    """Posterior summary of one step or stride measurement."""

    kind: str            # "step" | "stride"
    foot: str            # stepping foot / stride foot
    t_start: float
    t_end: float
    samples: np.ndarray  # (S,) posterior draws, mm
    median: float
    ground_truth: float
    uncertainty: float   # posterior SD, mm
    error: float         # |ground_truth - median|, mm
    pit: float

    def to_row(self) -> dict:
        return {
            "kind": self.kind,
            "foot": self.foot,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "median_mm": self.median,
            "ground_truth_mm": self.ground_truth,
            "uncertainty_mm": self.uncertainty,
            "error_mm": self.error,
            "pit": self.pit,
        }


def detect_stance(
    times: np.ndarray,
    heel_positions: np.ndarray,
    foot: str,
    ground_height: float = 0.0,
    height_thresh: float = HEIGHT_THRESH_M,
    speed_thresh: float = SPEED_THRESH_MS,
    min_duration: float = MIN_STANCE_S,
    source: str = "detector",
) -> List[StancePhase]:
    """Find ground-contact windows of one heel.

    A frame is in stance when the heel sits below ``height_thresh`` above
    the ground and moves slower than ``speed_thresh``.  Runs shorter than
    ``min_duration`` are dropped.  An empty result is valid (no contacts).
    """
    times = np.asarray(times, dtype=np.float64)
    pos = np.asarray(heel_positions, dtype=np.float64)
    if pos.shape != (times.shape[0], 3):
        raise GaitError(f"heel series must be (T, 3), got {pos.shape}")
    if times.shape[0] < 2:
        return []
    vel = np.gradient(pos, times, axis=0)
    speed = np.linalg.norm(vel, axis=1)
    height = pos[:, 2] - ground_height
    mask = (height < height_thresh) & (speed < speed_thresh)

    phases: List[StancePhase] = []
    t = 0
    n = len(mask)
    while t < n:
        if not mask[t]:
            t += 1
            continue
        start = t
        while t < n and mask[t]:
            t += 1
        end = t - 1
        if times[end] - times[start] + 1e-12 >= min_duration:
            window = times[start : end + 1]
            phases.append(
                StancePhase(
                    foot=foot,
                    contact=float(times[start]),
                    toe_off=float(times[end]),
                    heel_center=float(np.median(window)),
                    source=source,
                )
            )
    return phases


def _heel_site_indices(chain: KinematicChain) -> Dict[str, int]:
    sites = {}
    for foot, name in (("left", "l_heel"), ("right", "r_heel")):
        if name not in chain.site_names:
            raise GaitError(f"chain has no {name!r} site; cannot measure gait")
        sites[foot] = chain.site_index(name)
    return sites


def metric_posterior(
    traj: VariationalTrajectory,
    chain: KinematicChain,
    offsets: SiteOffsets,
    stances: Sequence[StancePhase],
    reference_heels: Optional[np.ndarray] = None,
    draws: int = 1000,
    seed: int = 0,
    walkway: Optional[WalkwayFrame] = None,
    stride_mode: str = "lengthwise",
) -> Tuple[List[GaitMetricSample], dict]:
    """Monte-Carlo step/stride posteriors at the stance heel-center times.

    Draws joint-angle samples from the fitted posterior at each stance
    midpoint, pushes them through forward kinematics to heel positions,
    and forms paired differences in the walkway frame.  ``reference_heels``
    ((n_events, 3), world metres) supplies the ground-truth heel position
    per stance event; PIT values are computed against the implied
    ground-truth metric.  Events outside the trajectory span are skipped
    and reported in the diagnostics dict.
    """
    if draws < 2:
        raise GaitError("need at least 2 posterior draws")
    heel_idx = _heel_site_indices(chain)
    events = sorted(stances, key=lambda s: s.heel_center)
    if reference_heels is not None:
        reference_heels = np.asarray(reference_heels, dtype=np.float64)
        if reference_heels.shape != (len(stances), 3):
            raise GaitError("reference_heels must align with the stance list")
        order = sorted(range(len(stances)), key=lambda i: stances[i].heel_center)
        reference_heels = reference_heels[order]

    t0, t1 = traj.basis.t0, traj.basis.t1
    kept: List[StancePhase] = []
    kept_ref: List[np.ndarray] = []
    skipped: List[dict] = []
    for i, ev in enumerate(events):
        if t0 - 1e-9 <= ev.heel_center <= t1 + 1e-9:
            kept.append(ev)
            if reference_heels is not None:
                kept_ref.append(reference_heels[i])
        else:
            skipped.append({"foot": ev.foot, "heel_center": ev.heel_center, "reason": "outside fitted span"})

    # heel positions per event: (n_events, draws, 3). Draws are coherent
    # trajectory samples, not independent per event: consecutive stance
    # events sit well inside the posterior's temporal correlation length,
    # and independent sampling would double-count variance in the paired
    # differences below.
    event_times = [min(max(ev.heel_center, t0), t1) for ev in kept]
    theta_paths = sample_path(traj, event_times, draws, seed=[seed, 617])
    heel_samples = []
    heel_truth = []
    for i, ev in enumerate(kept):
        sites, _ = fk_batch(chain, theta_paths[i], offsets.values)
        heel_samples.append(sites[:, heel_idx[ev.foot], :])
        if reference_heels is not None:
            heel_truth.append(kept_ref[i])
    diagnostics = {"n_events": len(kept), "skipped_events": skipped}
    if len(kept) < 2:
        return [], diagnostics

    heel_samples = np.stack(heel_samples)  # (E, S, 3)
    if walkway is None:
        medians = np.median(heel_samples, axis=1)
        walkway = align_to_walkway(medians)
    hw = walkway.apply(heel_samples) * MM
    truth_w = walkway.apply(np.stack(heel_truth)) * MM if heel_truth else None

    out: List[GaitMetricSample] = []

    def _emit(kind, i_prev, i_next, values, gt):
        med = float(np.median(values))
        sd = float(values.std())
        err = float(abs(gt - med)) if np.isfinite(gt) else float("nan")
        pit = spatial_pit(values, gt) if np.isfinite(gt) else float("nan")
        out.append(
            GaitMetricSample(
                kind=kind,
                foot=kept[i_next].foot,
                t_start=kept[i_prev].heel_center,
                t_end=kept[i_next].heel_center,
                samples=values,
                median=med,
                ground_truth=float(gt),
                uncertainty=sd,
                error=err,
                pit=float(pit),
            )
        )

    for i in range(1, len(kept)):
        prev, nxt = kept[i - 1], kept[i]
        if prev.foot == nxt.foot:
            continue
        vals = np.abs(hw[i, :, 0] - hw[i - 1, :, 0])
        gt = (
            step_length(truth_w[i - 1], truth_w[i], prev.foot, nxt.foot)
            if truth_w is not None
            else float("nan")
        )
        _emit("step", i - 1, i, vals, gt)

    last_same: Dict[str, int] = {}
    for i, ev in enumerate(kept):
        j = last_same.get(ev.foot)
        if j is not None:
            if stride_mode == "lengthwise":
                vals = np.abs(hw[i, :, 0] - hw[j, :, 0])
            else:
                vals = np.hypot(hw[i, :, 0] - hw[j, :, 0], hw[i, :, 1] - hw[j, :, 1])
            gt = (
                stride_length(truth_w[j], truth_w[i], ev.foot, ev.foot, mode=stride_mode)
                if truth_w is not None
                else float("nan")
            )
            _emit("stride", j, i, vals, gt)
        last_same[ev.foot] = i
    return out, diagnostics


@dataclass
class BiasTable:
    """Per-participant, per-joint constant offsets (degrees).

    bias = mean(predicted - reference) over a participant's trials, so the
    corrected prediction is ``predicted - bias``.
    """

    biases: Dict[Tuple[str, int], float] = field(default_factory=dict)
    excluded: List[str] = field(default_factory=list)

    def bias_for(self, participant: str, joint: int) -> float:
        return self.biases.get((participant, joint), 0.0)

    def to_dict(self) -> dict:
        rows = [
            {"participant": p, "joint": j, "bias_deg": b}
            for (p, j), b in sorted(self.biases.items())
        ]
        return {"rows": rows, "excluded": sorted(self.excluded)}


def bias_correct(
    predicted: Sequence[np.ndarray],
    reference: Sequence[np.ndarray],
    participants: Sequence[str],
) -> Tuple[BiasTable, List[np.ndarray]]:
    """Remove each participant's constant joint-angle offset.

    Trials are (T, J) arrays in degrees.  Participants contributing only
    empty trials get no table entry and their trials pass through
    unchanged; they are listed in ``table.excluded``.
    """
    if not (len(predicted) == len(reference) == len(participants)):
        raise GaitError("predicted, reference and participants must align")
    per_part: Dict[str, List[np.ndarray]] = {}
    for pred, ref, part in zip(predicted, reference, participants):
        pred = np.asarray(pred, dtype=np.float64)
        ref = np.asarray(ref, dtype=np.float64)
        if pred.shape != ref.shape:
            raise GaitError("prediction and reference trials must have matching shapes")
        if pred.size == 0:
            continue
        per_part.setdefault(part, []).append(pred.mean(axis=0) - ref.mean(axis=0))

    table = BiasTable()
    for part in sorted(set(participants)):
        diffs = per_part.get(part)
        if not diffs:
            table.excluded.append(part)
            continue
        mean_diff = np.mean(np.stack(diffs), axis=0)
        for j, b in enumerate(mean_diff):
            table.biases[(part, j)] = float(b)

    corrected = []
    for pred, part in zip(predicted, participants):
        pred = np.asarray(pred, dtype=np.float64)
        if pred.size == 0 or part in table.excluded:
            corrected.append(pred.copy())
            continue
        shift = np.array([table.bias_for(part, j) for j in range(pred.shape[1])])
        corrected.append(pred - shift[None, :])
    return table, corrected


def stratify_by_uncertainty(
    samples: Sequence[GaitMetricSample],
    n_bins: int = 5,
    n_boot: int = 1000,
    seed: int = 0,
) -> dict:
    """Slice metric errors by posterior uncertainty.

    Returns overall, below-median, top/bottom-decile strata plus
    equal-count uncertainty bins with bootstrap 95% CIs on the MAE.
    """
    usable = [s for s in samples if np.isfinite(s.error)]
    if len(usable) < 10:
        raise GaitError(f"need at least 10 samples to stratify, got {len(usable)}")
    if len(usable) < n_bins:
        raise GaitError(f"fewer samples ({len(usable)}) than bins ({n_bins})")
    unc = np.array([s.uncertainty for s in usable])
    err = np.array([s.error for s in usable])

    def _summary(mask: np.ndarray) -> dict:
        e, u = err[mask], unc[mask]
        qe = np.percentile(e, [25, 50, 75])
        qu = np.percentile(u, [25, 50, 75])
        return {
            "n": int(mask.sum()),
            "error_median": float(qe[1]),
            "error_iqr": float(qe[2] - qe[0]),
            "uncertainty_median": float(qu[1]),
            "uncertainty_iqr": float(qu[2] - qu[0]),
        }

    q50, q10, q90 = (np.quantile(unc, q) for q in (0.5, 0.1, 0.9))
    result = {
        "n": len(usable),
        "overall": _summary(np.ones(len(usable), dtype=bool)),
        "below_median": _summary(unc <= q50),
        "bottom_decile": _summary(unc <= q10),
        "top_decile": _summary(unc >= q90),
    }

    rng = np.random.default_rng(seed)
    order = np.argsort(unc, kind="stable")
    bins = []
    edges = np.linspace(0, len(usable), n_bins + 1).astype(int)
    for b in range(n_bins):
        idx = order[edges[b] : edges[b + 1]]
        e = err[idx]
        boot = np.empty(n_boot)
        for r in range(n_boot):
            boot[r] = np.abs(e[rng.integers(0, len(e), len(e))]).mean()
        bins.append(
            {
                "bin": b,
                "n": int(len(idx)),
                "uncertainty_lo": float(unc[idx].min()),
                "uncertainty_hi": float(unc[idx].max()),
                "uncertainty_median": float(np.median(unc[idx])),
                "mae": float(np.abs(e).mean()),
                "mae_ci_low": float(np.percentile(boot, 2.5)),
                "mae_ci_high": float(np.percentile(boot, 97.5)),
            }
        )
    result["bins"] = bins
    return result


def save_metrics_csv(samples: Sequence[GaitMetricSample], path) -> None:
    cols = ["kind", "foot", "t_start", "t_end", "median_mm", "ground_truth_mm", "uncertainty_mm", "error_mm", "pit"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for s in samples:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in s.to_row().items()})


def save_strata_json(strata: dict, path, schema_version: int = 1, **extra) -> None:
    payload = {"schema_version": schema_version, **extra, "strata": strata}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
