"""Basis-parameterized Gaussian trajectory posteriors.

A `VariationalTrajectory` maps time to the moments of a Gaussian over the
configuration vector: mean mu(t), a low-rank factor u(t) [D x R], and a
strictly positive diagonal d(t), so Sigma(t) = u u^T + diag(d^2). All three
are blends of per-basis coefficients under a clamped cubic B-spline basis;
the diagonal coefficients are blended first and then squashed through
softplus with a 1e-4 floor, which keeps Sigma positive definite everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "SpanError",
    "TrajectoryBasis",
    "VariationalTrajectory",
    "PosteriorMoment",
    "evaluate",
    "sample",
    "entropy",
    "lowrank_logdet",
    "DIAG_FLOOR",
]

DIAG_FLOOR = 1e-4


class SpanError(ValueError):
    """Evaluation time outside the basis knot span."""


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    # inverse of log(1+e^x); valid for y > 0
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True)
class TrajectoryBasis:
    """Clamped cubic B-spline basis over [t0, t1]."""

    knots: np.ndarray  # full knot vector, length B + degree + 1
    degree: int = 3

    def __post_init__(self):
        object.__setattr__(self, "knots", np.asarray(self.knots, dtype=np.float64))
        if np.any(np.diff(self.knots) < 0):
            raise ValueError("knots must be nondecreasing")
        if self.n_basis < self.degree + 1:
            raise ValueError("too few basis functions for the degree")

    @property
    def n_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def t0(self) -> float:
        return float(self.knots[self.degree])

    @property
    def t1(self) -> float:
        return float(self.knots[-self.degree - 1])

    @staticmethod
    def for_span(t0: float, t1: float, spacing: float = 0.25) -> "TrajectoryBasis":
        """Basis with roughly one interior knot per `spacing` seconds."""
        if t1 <= t0:
            raise ValueError("empty time span")
        n_seg = max(1, int(round((t1 - t0) / spacing)))
        interior = np.linspace(t0, t1, n_seg + 1)[1:-1]
        knots = np.concatenate([[t0] * 4, interior, [t1] * 4])
        return TrajectoryBasis(knots=knots)

    def weights(self, ts) -> np.ndarray:
        """Basis design matrix: nonnegative rows summing to 1, shape [N, B].

        Cox-de Boor recursion, vectorized over evaluation points; the right
        endpoint is inclusive.
        """
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        if np.any(ts < self.t0 - 1e-12) or np.any(ts > self.t1 + 1e-12):
            raise SpanError(f"time outside span [{self.t0}, {self.t1}]")
        ts = np.clip(ts, self.t0, self.t1)
        kn = self.knots
        t = ts[:, None]
        n = (t >= kn[None, :-1]) & (t < kn[None, 1:])
        # the closing endpoint belongs to the last nonempty interval
        at_end = ts >= kn[-1]
        if np.any(at_end):
            last = np.max(np.where(np.diff(kn) > 0)[0])
            n[at_end, :] = False
            n[at_end, last] = True
        n = n.astype(np.float64)
        for p in range(1, self.degree + 1):
            left_den = kn[p:-1] - kn[: -p - 1]
            right_den = kn[p + 1:] - kn[1:-p]
            left = np.where(left_den > 0, (t - kn[None, : -p - 1]) / np.where(left_den > 0, left_den, 1.0), 0.0)
            right = np.where(right_den > 0, (kn[None, p + 1:] - t) / np.where(right_den > 0, right_den, 1.0), 0.0)
            n = left * n[:, :-1] + right * n[:, 1:]
        return n

    def to_dict(self) -> dict:
        return {"kind": "cubic_bspline", "degree": self.degree, "knots": [float(k) for k in self.knots]}

    @staticmethod
    def from_dict(doc: dict) -> "TrajectoryBasis":
        if doc.get("kind") != "cubic_bspline":
            raise ValueError(f"unknown basis kind {doc.get('kind')!r}")
        return TrajectoryBasis(knots=np.array(doc["knots"]), degree=doc["degree"])


@dataclass
class VariationalTrajectory:
    """Coefficients of the time-varying Gaussian family.

    mean: [B, D]; factor: [B, D, R]; raw_diag: [B, D] (pre-softplus).
    """

    basis: TrajectoryBasis
    mean: np.ndarray
    factor: np.ndarray
    raw_diag: np.ndarray

    def __post_init__(self):
        b = self.basis.n_basis
        if self.mean.shape[0] != b or self.factor.shape[0] != b or self.raw_diag.shape[0] != b:
            raise ValueError("coefficient arrays must have one row per basis function")
        if self.mean.shape != self.raw_diag.shape:
            raise ValueError("mean and raw_diag must share [B, D]")
        if self.factor.shape[:2] != self.mean.shape:
            raise ValueError("factor must be [B, D, R]")
        if not 1 <= self.rank <= self.dim:
            raise ValueError("rank must satisfy 1 <= R <= D")

    @property
    def dim(self) -> int:
        return self.mean.shape[1]

    @property
    def rank(self) -> int:
        return self.factor.shape[2]

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "basis": self.basis.to_dict(),
            "mean": self.mean.tolist(),
            "factor": self.factor.tolist(),
            "raw_diag": self.raw_diag.tolist(),
        }

    @staticmethod
    def from_dict(doc: dict) -> "VariationalTrajectory":
        return VariationalTrajectory(
            basis=TrajectoryBasis.from_dict(doc["basis"]),
            mean=np.array(doc["mean"], dtype=np.float64),
            factor=np.array(doc["factor"], dtype=np.float64),
            raw_diag=np.array(doc["raw_diag"], dtype=np.float64),
        )

    def save(self, path) -> None:
        with open(Path(path), "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True)

    @staticmethod
    def load(path) -> "VariationalTrajectory":
        with open(Path(path)) as f:
            return VariationalTrajectory.from_dict(json.load(f))


@dataclass(frozen=True)
class PosteriorMoment:
    """Gaussian moments at one time: N(mean, u u^T + diag(d^2))."""

    t: float
    mean: np.ndarray  # [D]
    u: np.ndarray  # [D, R]
    d: np.ndarray  # [D], strictly positive
    sigma: np.ndarray  # [D] marginal SD, sqrt(sum_r u^2 + d^2)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    def dense_cov(self) -> np.ndarray:
        return self.u @ self.u.T + np.diag(self.d**2)


def evaluate(traj: VariationalTrajectory, t: float) -> PosteriorMoment:
    """Blend coefficients at time t; raises SpanError outside the knot span."""
    w = traj.basis.weights([t])[0]
    mean = w @ traj.mean
    u = np.einsum("b,bdr->dr", w, traj.factor)
    d = DIAG_FLOOR + softplus(w @ traj.raw_diag)
    sigma = np.sqrt(np.sum(u**2, axis=1) + d**2)
    return PosteriorMoment(t=float(t), mean=mean, u=u, d=d, sigma=sigma)


def sample(moment: PosteriorMoment, draws: int, seed) -> np.ndarray:
    """Reparameterized draws theta = mu + u eps1 + d * eps2, shape [M, D]."""
    if draws < 1:
        raise ValueError("need at least one draw")
    rng = np.random.default_rng(seed)
    eps1 = rng.standard_normal((draws, moment.rank))
    eps2 = rng.standard_normal((draws, moment.dim))
    return moment.mean[None, :] + eps1 @ moment.u.T + moment.d[None, :] * eps2


def sample_path(traj: VariationalTrajectory, ts, draws: int, seed) -> np.ndarray:
    """Temporally coherent draws at several times, shape [T, M, D].

    Both noise vectors are drawn once per path and pushed through the
    time-varying (mean, u, d), so a draw is one smooth trajectory whose
    marginal at any single time matches sample(evaluate(traj, t), ...).
    Treating the per-frame Gaussians as independent instead would make
    differences between nearby times double-count the marginal variance
    (and grow without bound as the frame rate rises); a trajectory-level
    posterior has continuous sample paths.
    """
    ts = np.asarray(ts, dtype=np.float64)
    if draws < 1:
        raise ValueError("need at least one draw")
    rng = np.random.default_rng(seed)
    rank = traj.factor.shape[2]
    dim = traj.mean.shape[1]
    eps1 = rng.standard_normal((draws, rank))
    eps2 = rng.standard_normal((draws, dim))
    out = np.empty((ts.size, draws, dim))
    for k, t in enumerate(ts):
        m = evaluate(traj, float(t))
        out[k] = m.mean[None, :] + eps1 @ m.u.T + m.d[None, :] * eps2
    return out


def lowrank_logdet(u: np.ndarray, d: np.ndarray) -> float:
    """log det(u u^T + diag(d^2)) via the matrix determinant lemma."""
    r = u.shape[1]
    core = np.eye(r) + (u / (d**2)[:, None]).T @ u
    sign, ld_core = np.linalg.slogdet(core)
    if sign <= 0:
        raise np.linalg.LinAlgError("core matrix not positive definite")
    return float(2.0 * np.sum(np.log(d)) + ld_core)


def entropy(moment: PosteriorMoment) -> float:
    """Differential entropy in nats: D/2 log(2 pi e) + 1/2 log det Sigma."""
    d_dim = moment.dim
    return 0.5 * d_dim * np.log(2.0 * np.pi * np.e) + 0.5 * lowrank_logdet(moment.u, moment.d)
