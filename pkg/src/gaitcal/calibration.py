"""Calibration mathematics: PIT transforms, ECE, P-P curves, coverage.

A probability integral transform (PIT) maps an observed error through its
predicted CDF; if the predictive distribution is right, PIT values are
uniform on [0,1]. The expected calibration error (ECE) is the mean absolute
gap between the sorted PIT values and the uniform quantiles i/N. Two PIT
flavors are used: a rank-based one for sampling distributions of scalar
metrics, and a parametric HalfNormal one for per-frame angle errors.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special as _special

__all__ = [
    "PitSet",
    "CalibrationReport",
    "ece_from_pit",
    "spatial_pit",
    "kinematic_pit",
    "coverage_at_nominal",
    "calibration_curve",
    "halfnormal_quantile",
    "NOMINAL_LEVELS",
]

NOMINAL_LEVELS = (0.25, 0.50, 0.75, 0.95)


@dataclass(frozen=True)
class PitSet:
    """PIT values in [0,1] with a provenance label (spatial|kinematic|internal)."""

    values: np.ndarray
    label: str = "spatial"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.size < 1:
            raise ValueError("a PIT set needs at least one value")
        if v.min() < -1e-12 or v.max() > 1 + 1e-12:
            raise ValueError("PIT values must lie in [0,1]")

    def __len__(self) -> int:
        return self.values.size


def ece_from_pit(pit: PitSet | np.ndarray) -> float:
    """Mean |u_(i) - i/N| over the ascending-sorted PIT values."""
    v = pit.values if isinstance(pit, PitSet) else np.asarray(pit, dtype=np.float64)
    if v.size < 1:
        raise ValueError("empty PIT set")
    u = np.sort(v)
    n = u.size
    p = np.arange(1, n + 1) / n
    return float(np.mean(np.abs(u - p)))


def spatial_pit(samples: np.ndarray, ground_truth: float) -> float:
    """Rank of the truth's deviation from the sample median among the samples.

    u = (1/S) sum 1(|y_i - median| <= |gt - median|); ties count as covered.
    """
    y = np.asarray(samples, dtype=np.float64)
    if y.size < 2:
        raise ValueError("need at least 2 samples")
    med = np.median(y)
    e_i = np.abs(y - med)
    e = abs(float(ground_truth) - med)
    return float(np.mean(e_i <= e))


def kinematic_pit(errors, scales, label: str = "kinematic") -> PitSet:
    """HalfNormal PIT: u = erf(e / (sigma sqrt(2))) per frame."""
    e = np.asarray(errors, dtype=np.float64)
    s = np.asarray(scales, dtype=np.float64)
    if e.shape != s.shape:
        raise ValueError("errors and scales must have equal length")
    bad = np.where(s <= 0)[0]
    if bad.size:
        raise ValueError(f"nonpositive scale at frame {bad[0]}")
    return PitSet(values=_special.erf(np.abs(e) / (s * np.sqrt(2.0))), label=label)


def halfnormal_quantile(level: float) -> float:
    """z such that a HalfNormal(1) variable is below z with probability `level`."""
    return float(np.sqrt(2.0) * _special.erfinv(level))


def coverage_at_nominal(errors, scales, levels=NOMINAL_LEVELS) -> dict[float, float]:
    """Fraction of errors inside the sigma-scaled HalfNormal quantile per level."""
    e = np.asarray(errors, dtype=np.float64)
    s = np.asarray(scales, dtype=np.float64)
    if e.shape != s.shape:
        raise ValueError("errors and scales must have equal length")
    if np.any(s <= 0):
        raise ValueError("nonpositive scale")
    out = {}
    for lv in levels:
        if not 0 < lv < 1:
            raise ValueError("levels must lie in (0,1)")
        out[float(lv)] = float(np.mean(np.abs(e) <= s * halfnormal_quantile(lv)))
    return out


def calibration_curve(pit: PitSet | np.ndarray) -> np.ndarray:
    """Ordered (p_i, u_(i)) pairs for P-P plotting, shape [N, 2]."""
    v = pit.values if isinstance(pit, PitSet) else np.asarray(pit, dtype=np.float64)
    u = np.sort(v)
    n = u.size
    p = np.arange(1, n + 1) / n
    return np.column_stack([p, u])


@dataclass
class CalibrationReport:
    """ECE, curve, and coverage for one monitored quantity."""

    label: str
    ece: float
    curve: np.ndarray  # [N,2] (p, u) pairs
    coverage: dict[float, float]
    n: int = field(default=0)

    @staticmethod
    def from_pit(pit: PitSet, coverage: dict[float, float] | None = None) -> "CalibrationReport":
        if coverage is None:
            # coverage at level L equals the fraction of PIT values <= L
            coverage = {float(lv): float(np.mean(pit.values <= lv)) for lv in NOMINAL_LEVELS}
        return CalibrationReport(
            label=pit.label,
            ece=ece_from_pit(pit),
            curve=calibration_curve(pit),
            coverage=coverage,
            n=len(pit),
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "label": self.label,
            "ece": self.ece,
            "n": self.n,
            "coverage": {f"{k:.2f}": v for k, v in sorted(self.coverage.items())},
            "curve": [[float(p), float(u)] for p, u in self.curve],
        }

    def save(self, path) -> None:
        with open(Path(path), "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True)

    def save_curve_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["p", "u"])
            for p, u in self.curve:
                w.writerow([f"{p:.10g}", f"{u:.10g}"])
