"""Articulated kinematic chains with marker sites.

A chain is a tree of rigid segments. Segment 0 is the root and carries six
free coordinates (translation + intrinsic XYZ rotation); every other segment
adds one revolute joint about a fixed axis expressed in its own frame, so a
chain with K segments has J = K - 1 joints and D = J + 6 configuration
coordinates. Sites are points rigidly attached to segments; their local
positions may be refined during fitting through a `SiteOffsets` displacement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .autodiff import Var, custom_op

__all__ = [
    "ChainError",
    "KinematicChain",
    "SiteOffsets",
    "forward_kinematics",
    "fk_batch",
    "fk_sites_var",
    "joint_limit_excess",
    "load_chain",
    "chain_to_dict",
]


class ChainError(ValueError):
    """Invalid chain definition or mismatched configuration input."""


def _skew(axis: np.ndarray) -> np.ndarray:
    x, y, z = axis
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class KinematicChain:
    """Immutable segment tree; heavy per-segment constants are precomputed."""

    names: tuple[str, ...]
    parents: np.ndarray  # int64 [K], parents[0] == -1, parents[k] < k
    offsets: np.ndarray  # [K,3] fixed translation in the parent frame [m]
    axes: np.ndarray  # [K,3] unit rotation axis in the local frame; row 0 unused
    joint_limits: np.ndarray  # [J,2] (theta_min, theta_max) [rad]
    site_names: tuple[str, ...]
    site_seg: np.ndarray  # int64 [S]
    site_loc: np.ndarray  # [S,3] nominal local offset [m]
    skew1: np.ndarray = field(init=False, repr=False)
    skew2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        k = len(self.names)
        if self.parents.shape != (k,) or self.parents[0] != -1:
            raise ChainError("segment 0 must be the root (parent -1)")
        for i in range(1, k):
            if not 0 <= self.parents[i] < i:
                raise ChainError(f"segment {i} parent must precede it in the list")
        if self.offsets.shape != (k, 3) or self.axes.shape != (k, 3):
            raise ChainError("offsets and axes must be [K,3]")
        norms = np.linalg.norm(self.axes[1:], axis=1)
        if k > 1 and np.any(np.abs(norms - 1.0) > 1e-9):
            raise ChainError("rotation axes must have unit norm")
        if self.joint_limits.shape != (k - 1, 2):
            raise ChainError("joint_limits must be [J,2]")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ChainError("joint limits must satisfy theta_min < theta_max")
        if self.site_seg.shape[0] != self.site_loc.shape[0] or len(self.site_names) != self.site_seg.shape[0]:
            raise ChainError("site arrays must share cardinality")
        if np.any(self.site_seg < 0) or np.any(self.site_seg >= k):
            raise ChainError("site segment index out of range")
        has_child = np.zeros(k, dtype=bool)
        has_child[self.parents[1:]] = True
        terminal = ~has_child
        sited = np.zeros(k, dtype=bool)
        sited[self.site_seg] = True
        if np.any(terminal & ~sited):
            missing = [self.names[i] for i in np.where(terminal & ~sited)[0]]
            raise ChainError(f"terminal segments without a site: {missing}")
        s1 = np.zeros((k, 3, 3))
        s2 = np.zeros((k, 3, 3))
        for i in range(1, k):
            m = _skew(self.axes[i])
            s1[i] = m
            s2[i] = m @ m
        object.__setattr__(self, "skew1", s1)
        object.__setattr__(self, "skew2", s2)

    @property
    def n_segments(self) -> int:
        return len(self.names)

    @property
    def n_joints(self) -> int:
        return len(self.names) - 1

    @property
    def dof(self) -> int:
        """Configuration dimension: 6 root coordinates + one angle per joint."""
        return 5 + len(self.names)

    @property
    def n_sites(self) -> int:
        return len(self.site_names)

    def site_index(self, name: str) -> int:
        return self.site_names.index(name)

    def pack_q(self, root_pose, joint_angles) -> np.ndarray:
        root_pose = np.asarray(root_pose, dtype=np.float64)
        joint_angles = np.atleast_1d(np.asarray(joint_angles, dtype=np.float64))
        if root_pose.shape != (6,):
            raise ChainError("root pose must have 6 coordinates")
        if joint_angles.shape != (self.n_joints,):
            raise ChainError(f"expected {self.n_joints} joint angles, got {joint_angles.shape}")
        return np.concatenate([root_pose, joint_angles])


@dataclass(frozen=True)
class SiteOffsets:
    """Learnable displacement of each site from its nominal local offset [m]."""

    values: np.ndarray  # [S,3]

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 2 or self.values.shape[1] != 3:
            raise ChainError("site offsets must be [S,3]")
        if not np.all(np.isfinite(self.values)):
            raise ChainError("site offsets must be finite")

    @staticmethod
    def zeros(chain: KinematicChain) -> "SiteOffsets":
        return SiteOffsets(np.zeros((chain.n_sites, 3)))

    def check(self, chain: KinematicChain) -> None:
        if self.values.shape[0] != chain.n_sites:
            raise ChainError("site offset cardinality does not match chain sites")


def fk_batch(chain: KinematicChain, q: np.ndarray, delta: np.ndarray | None = None):
    """Evaluate site positions for a [N,D] batch of configurations.

    Returns (sites [N,S,3], aux) where aux carries the intermediates the
    backward kernel needs.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.shape[-1] != chain.dof:
        raise ChainError(f"configuration must have {chain.dof} coordinates")
    if delta is None:
        delta = np.zeros((chain.n_sites, 3))
    sites, r_w, t_w, rot = kernels.fk_forward(
        q, chain.parents, chain.offsets, chain.skew1, chain.skew2,
        chain.site_seg, chain.site_loc, delta,
    )
    return sites, (q, r_w, rot, delta)


def forward_kinematics(chain: KinematicChain, root_pose, joint_angles, offsets: SiteOffsets | None = None) -> np.ndarray:
    """World positions of every site for a single configuration, shape [S,3]."""
    if offsets is None:
        offsets = SiteOffsets.zeros(chain)
    offsets.check(chain)
    q = chain.pack_q(root_pose, joint_angles)
    sites, _ = fk_batch(chain, q[None, :], offsets.values)
    return sites[0]


def fk_sites_var(chain: KinematicChain, q: Var, delta: Var) -> Var:
    """Forward kinematics as a differentiable graph node.

    q may have any leading batch shape ending in the configuration dimension;
    the result appends (S, 3). Gradients flow to both q and the site offsets.
    """
    batch_shape = q.value.shape[:-1]
    qf = q.value.reshape(-1, chain.dof)
    sites, r_w, t_w, rot = kernels.fk_forward(
        qf, chain.parents, chain.offsets, chain.skew1, chain.skew2,
        chain.site_seg, chain.site_loc, delta.value,
    )
    s = chain.n_sites

    def vjp(g):
        dq, dd = kernels.fk_backward(
            qf, g.reshape(-1, s, 3), r_w, rot, chain.parents, chain.offsets,
            chain.skew1, chain.skew2, chain.site_seg, chain.site_loc, delta.value,
        )
        return dq.reshape(q.value.shape), dd

    return custom_op(sites.reshape(batch_shape + (s, 3)), (q, delta), vjp)


def joint_limit_excess(chain: KinematicChain, joint_angles) -> float:
    """Sum of squared limit violations, zero iff every joint is within limits."""
    th = np.asarray(joint_angles, dtype=np.float64)
    if th.shape[-1] != chain.n_joints:
        raise ChainError(f"expected {chain.n_joints} joint angles")
    lo = chain.joint_limits[:, 0]
    hi = chain.joint_limits[:, 1]
    over = np.maximum(0.0, th - hi)
    under = np.maximum(0.0, lo - th)
    return float(np.sum(over**2 + under**2))


# -- JSON schema ---------------------------------------------------------------
#
# {
#   "schema_version": 1,
#   "segments": [
#     {"name": "pelvis", "parent": -1, "offset": [0,0,0]},
#     {"name": "l_thigh", "parent": 0, "offset": [0,0.1,0],
#      "axis": [0,1,0], "limits": [-1.2, 1.2]},
#     ...
#   ],
#   "sites": [{"name": "l_heel", "seg": 5, "loc": [-0.07, 0, -0.05]}, ...]
# }


def chain_to_dict(chain: KinematicChain) -> dict:
    segments = []
    for i, name in enumerate(chain.names):
        seg = {"name": name, "parent": int(chain.parents[i]), "offset": list(chain.offsets[i])}
        if i > 0:
            seg["axis"] = list(chain.axes[i])
            seg["limits"] = list(chain.joint_limits[i - 1])
        segments.append(seg)
    sites = [
        {"name": n, "seg": int(s), "loc": list(l)}
        for n, s, l in zip(chain.site_names, chain.site_seg, chain.site_loc)
    ]
    return {"schema_version": 1, "segments": segments, "sites": sites}


def chain_from_dict(doc: dict) -> KinematicChain:
    segs = doc["segments"]
    k = len(segs)
    names = tuple(s["name"] for s in segs)
    parents = np.array([s["parent"] for s in segs], dtype=np.int64)
    offsets = np.array([s["offset"] for s in segs], dtype=np.float64)
    axes = np.zeros((k, 3))
    limits = np.zeros((k - 1, 2))
    for i in range(1, k):
        axes[i] = segs[i]["axis"]
        limits[i - 1] = segs[i]["limits"]
    sites = doc["sites"]
    return KinematicChain(
        names=names,
        parents=parents,
        offsets=offsets,
        axes=axes,
        joint_limits=limits,
        site_names=tuple(s["name"] for s in sites),
        site_seg=np.array([s["seg"] for s in sites], dtype=np.int64),
        site_loc=np.array([s["loc"] for s in sites], dtype=np.float64),
    )


def load_chain(path) -> KinematicChain:
    with open(Path(path)) as f:
        return chain_from_dict(json.load(f))
