"""Batched forward-kinematics kernels.

The fitting loop evaluates a kinematic tree at every (frame, posterior
sample) pair, so these kernels are the hot path. Two interchangeable
implementations are provided:

* a vectorized numpy one (always available), and
* a numba ``@njit`` one compiled from explicit loops.

The active backend is chosen at import time from the ``GAITCAL_NUMBA``
environment variable (set to ``0``/``false`` to force numpy) and can be
switched at runtime with :func:`set_backend`. Both produce the same numbers
to machine precision; ``benchmarks/bench_fk.py`` compares their speed.

Configuration layout per pose (dimension ``D = 6 + (K - 1)`` for ``K``
segments): indices 0:3 are the root translation, 3:6 the root intrinsic
XYZ Euler angles, and ``5 + k`` the revolute angle of segment ``k >= 1``.
Segment frames compose as parent, then a fixed translation, then a rotation
about a fixed local axis. Sites are points rigidly attached to a segment at
``loc + delta`` where ``delta`` is a learnable offset shared across poses.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "HAS_NUMBA",
    "active_backend",
    "set_backend",
    "fk_forward",
    "fk_backward",
]

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

    def njit(*args, **kwargs):  # pragma: no cover
        def wrap(f):
            return f

        return wrap if not (args and callable(args[0])) else args[0]


_env = os.environ.get("GAITCAL_NUMBA", "1").strip().lower()
_BACKEND = "numba" if HAS_NUMBA and _env not in ("0", "false", "off") else "numpy"


def active_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> str:
    """Select 'numba' or 'numpy'; returns the backend actually in effect."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not available")
    _BACKEND = name
    return _BACKEND


# -- numpy implementation -----------------------------------------------------


def _euler_xyz_np(a, b, c):
    """Batched intrinsic XYZ rotation Rx(a) @ Ry(b) @ Rz(c), shape [N,3,3]."""
    n = a.shape[0]
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    rx = np.zeros((n, 3, 3))
    rx[:, 0, 0] = 1.0
    rx[:, 1, 1], rx[:, 1, 2] = ca, -sa
    rx[:, 2, 1], rx[:, 2, 2] = sa, ca
    ry = np.zeros((n, 3, 3))
    ry[:, 1, 1] = 1.0
    ry[:, 0, 0], ry[:, 0, 2] = cb, sb
    ry[:, 2, 0], ry[:, 2, 2] = -sb, cb
    rz = np.zeros((n, 3, 3))
    rz[:, 2, 2] = 1.0
    rz[:, 0, 0], rz[:, 0, 1] = cc, -sc
    rz[:, 1, 0], rz[:, 1, 1] = sc, cc
    return rx, ry, rz


def _fk_forward_np(q, parents, offsets, k1, k2, site_seg, site_loc, site_delta):
    n, d = q.shape
    k = parents.shape[0]
    rx, ry, rz = _euler_xyz_np(q[:, 3], q[:, 4], q[:, 5])
    r_w = np.empty((n, k, 3, 3))
    t_w = np.empty((n, k, 3))
    rot = np.empty((n, k, 3, 3))
    rot[:, 0] = np.matmul(rx, np.matmul(ry, rz))
    r_w[:, 0] = rot[:, 0]
    t_w[:, 0] = q[:, 0:3]
    eye = np.eye(3)
    for j in range(1, k):
        th = q[:, 5 + j]
        s = np.sin(th)[:, None, None]
        c1 = (1.0 - np.cos(th))[:, None, None]
        a = eye + s * k1[j] + c1 * k2[j]
        rot[:, j] = a
        p = parents[j]
        r_w[:, j] = np.matmul(r_w[:, p], a)
        t_w[:, j] = t_w[:, p] + np.einsum("nij,j->ni", r_w[:, p], offsets[j])
    v = site_loc + site_delta
    sites = t_w[:, site_seg] + np.einsum("nsij,sj->nsi", r_w[:, site_seg], v)
    return sites, r_w, t_w, rot


def _fk_backward_np(q, dsites, r_w, rot, parents, offsets, k1, k2, site_seg, site_loc, site_delta):
    n, d = q.shape
    k = parents.shape[0]
    s_count = site_seg.shape[0]
    dr = np.zeros((n, k, 3, 3))
    dt = np.zeros((n, k, 3))
    dq = np.zeros((n, d))
    ddelta = np.zeros((s_count, 3))
    v = site_loc + site_delta
    for s in range(s_count):
        seg = site_seg[s]
        g = dsites[:, s]
        dt[:, seg] += g
        dr[:, seg] += g[:, :, None] * v[s][None, None, :]
        ddelta[s] = np.einsum("nij,ni->j", r_w[:, seg], g)
    for j in range(k - 1, 0, -1):
        p = parents[j]
        dr[:, p] += np.matmul(dr[:, j], np.swapaxes(rot[:, j], -1, -2))
        da = np.matmul(np.swapaxes(r_w[:, p], -1, -2), dr[:, j])
        th = q[:, 5 + j]
        aprime = np.cos(th)[:, None, None] * k1[j] + np.sin(th)[:, None, None] * k2[j]
        dq[:, 5 + j] = np.einsum("nij,nij->n", da, aprime)
        dt[:, p] += dt[:, j]
        dr[:, p] += dt[:, j][:, :, None] * offsets[j][None, None, :]
    dq[:, 0:3] = dt[:, 0]
    a, b, c = q[:, 3], q[:, 4], q[:, 5]
    rx, ry, rz = _euler_xyz_np(a, b, c)
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    drx = np.zeros((n, 3, 3))
    drx[:, 1, 1], drx[:, 1, 2] = -sa, -ca
    drx[:, 2, 1], drx[:, 2, 2] = ca, -sa
    dry = np.zeros((n, 3, 3))
    dry[:, 0, 0], dry[:, 0, 2] = -sb, cb
    dry[:, 2, 0], dry[:, 2, 2] = -cb, -sb
    drz = np.zeros((n, 3, 3))
    drz[:, 0, 0], drz[:, 0, 1] = -sc, -cc
    drz[:, 1, 0], drz[:, 1, 1] = cc, -sc
    g0 = dr[:, 0]
    dq[:, 3] = np.einsum("nij,nij->n", g0, np.matmul(drx, np.matmul(ry, rz)))
    dq[:, 4] = np.einsum("nij,nij->n", g0, np.matmul(rx, np.matmul(dry, rz)))
    dq[:, 5] = np.einsum("nij,nij->n", g0, np.matmul(rx, np.matmul(ry, drz)))
    return dq, ddelta


# -- numba implementation -----------------------------------------------------


@njit(cache=True)
def _mat3_mul(a, b, out):
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for m in range(3):
                acc += a[i, m] * b[m, j]
            out[i, j] = acc


@njit(cache=True)
def _euler_xyz_nb(a, b, c, out):
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    # Rx @ Ry @ Rz written out
    out[0, 0] = cb * cc
    out[0, 1] = -cb * sc
    out[0, 2] = sb
    out[1, 0] = ca * sc + sa * sb * cc
    out[1, 1] = ca * cc - sa * sb * sc
    out[1, 2] = -sa * cb
    out[2, 0] = sa * sc - ca * sb * cc
    out[2, 1] = sa * cc + ca * sb * sc
    out[2, 2] = ca * cb


@njit(cache=True)
def _fk_forward_nb(q, parents, offsets, k1, k2, site_seg, site_loc, site_delta):
    n = q.shape[0]
    k = parents.shape[0]
    s_count = site_seg.shape[0]
    r_w = np.empty((n, k, 3, 3))
    t_w = np.empty((n, k, 3))
    rot = np.empty((n, k, 3, 3))
    sites = np.empty((n, s_count, 3))
    for it in range(n):
        _euler_xyz_nb(q[it, 3], q[it, 4], q[it, 5], rot[it, 0])
        for i in range(3):
            t_w[it, 0, i] = q[it, i]
            for j in range(3):
                r_w[it, 0, i, j] = rot[it, 0, i, j]
        for seg in range(1, k):
            th = q[it, 5 + seg]
            s = np.sin(th)
            c1 = 1.0 - np.cos(th)
            for i in range(3):
                for j in range(3):
                    a_ij = s * k1[seg, i, j] + c1 * k2[seg, i, j]
                    if i == j:
                        a_ij += 1.0
                    rot[it, seg, i, j] = a_ij
            p = parents[seg]
            _mat3_mul(r_w[it, p], rot[it, seg], r_w[it, seg])
            for i in range(3):
                acc = t_w[it, p, i]
                for j in range(3):
                    acc += r_w[it, p, i, j] * offsets[seg, j]
                t_w[it, seg, i] = acc
        for s_i in range(s_count):
            seg = site_seg[s_i]
            for i in range(3):
                acc = t_w[it, seg, i]
                for j in range(3):
                    acc += r_w[it, seg, i, j] * (site_loc[s_i, j] + site_delta[s_i, j])
                sites[it, s_i, i] = acc
    return sites, r_w, t_w, rot


@njit(cache=True)
def _fk_backward_nb(q, dsites, r_w, rot, parents, offsets, k1, k2, site_seg, site_loc, site_delta):
    n, d = q.shape
    k = parents.shape[0]
    s_count = site_seg.shape[0]
    dq = np.zeros((n, d))
    ddelta = np.zeros((s_count, 3))
    dr = np.zeros((k, 3, 3))
    dt = np.zeros((k, 3))
    tmp = np.zeros((3, 3))
    tmp2 = np.zeros((3, 3))
    rx = np.zeros((3, 3))
    ry = np.zeros((3, 3))
    rz = np.zeros((3, 3))
    dm = np.zeros((3, 3))
    for it in range(n):
        for seg in range(k):
            for i in range(3):
                dt[seg, i] = 0.0
                for j in range(3):
                    dr[seg, i, j] = 0.0
        for s_i in range(s_count):
            seg = site_seg[s_i]
            for i in range(3):
                g_i = dsites[it, s_i, i]
                dt[seg, i] += g_i
                for j in range(3):
                    dr[seg, i, j] += g_i * (site_loc[s_i, j] + site_delta[s_i, j])
                    ddelta[s_i, j] += r_w[it, seg, i, j] * g_i
        for seg in range(k - 1, 0, -1):
            p = parents[seg]
            th = q[it, 5 + seg]
            cth, sth = np.cos(th), np.sin(th)
            acc_th = 0.0
            for i in range(3):
                for j in range(3):
                    # dR_w[p] += dR_w[seg] @ A^T
                    acc = 0.0
                    for m in range(3):
                        acc += dr[seg, i, m] * rot[it, seg, j, m]
                    dr[p, i, j] += acc
                    # dA = R_w[p]^T @ dR_w[seg]; contract with dA/dth
                    da_ij = 0.0
                    for m in range(3):
                        da_ij += r_w[it, p, m, i] * dr[seg, m, j]
                    acc_th += da_ij * (cth * k1[seg, i, j] + sth * k2[seg, i, j])
            dq[it, 5 + seg] = acc_th
            for i in range(3):
                dt[p, i] += dt[seg, i]
                for j in range(3):
                    dr[p, i, j] += dt[seg, i] * offsets[seg, j]
        for i in range(3):
            dq[it, i] = dt[0, i]
        a, b, c = q[it, 3], q[it, 4], q[it, 5]
        ca, sa = np.cos(a), np.sin(a)
        cb, sb = np.cos(b), np.sin(b)
        cc, sc = np.cos(c), np.sin(c)
        for i in range(3):
            for j in range(3):
                rx[i, j] = 0.0
                ry[i, j] = 0.0
                rz[i, j] = 0.0
                dm[i, j] = 0.0
        rx[0, 0] = 1.0
        rx[1, 1], rx[1, 2] = ca, -sa
        rx[2, 1], rx[2, 2] = sa, ca
        ry[1, 1] = 1.0
        ry[0, 0], ry[0, 2] = cb, sb
        ry[2, 0], ry[2, 2] = -sb, cb
        rz[2, 2] = 1.0
        rz[0, 0], rz[0, 1] = cc, -sc
        rz[1, 0], rz[1, 1] = sc, cc
        # d/da: dRx @ Ry @ Rz
        dm[1, 1], dm[1, 2] = -sa, -ca
        dm[2, 1], dm[2, 2] = ca, -sa
        _mat3_mul(dm, ry, tmp)
        _mat3_mul(tmp, rz, tmp2)
        acc = 0.0
        for i in range(3):
            for j in range(3):
                acc += dr[0, i, j] * tmp2[i, j]
        dq[it, 3] = acc
        # d/db: Rx @ dRy @ Rz
        for i in range(3):
            for j in range(3):
                dm[i, j] = 0.0
        dm[0, 0], dm[0, 2] = -sb, cb
        dm[2, 0], dm[2, 2] = -cb, -sb
        _mat3_mul(rx, dm, tmp)
        _mat3_mul(tmp, rz, tmp2)
        acc = 0.0
        for i in range(3):
            for j in range(3):
                acc += dr[0, i, j] * tmp2[i, j]
        dq[it, 4] = acc
        # d/dc: Rx @ Ry @ dRz
        for i in range(3):
            for j in range(3):
                dm[i, j] = 0.0
        dm[0, 0], dm[0, 1] = -sc, -cc
        dm[1, 0], dm[1, 1] = cc, -sc
        _mat3_mul(rx, ry, tmp)
        _mat3_mul(tmp, dm, tmp2)
        acc = 0.0
        for i in range(3):
            for j in range(3):
                acc += dr[0, i, j] * tmp2[i, j]
        dq[it, 5] = acc
    return dq, ddelta


# -- dispatch -----------------------------------------------------------------


def fk_forward(q, parents, offsets, k1, k2, site_seg, site_loc, site_delta):
    """Evaluate the chain for a batch of poses.

    q: [N, 6 + K - 1] configurations. Returns (sites [N,S,3], world
    rotations [N,K,3,3], world translations [N,K,3], local rotations
    [N,K,3,3]); the last three are consumed by :func:`fk_backward`.
    """
    q = np.ascontiguousarray(q, dtype=np.float64)
    if _BACKEND == "numba":
        return _fk_forward_nb(q, parents, offsets, k1, k2, site_seg, site_loc, site_delta)
    return _fk_forward_np(q, parents, offsets, k1, k2, site_seg, site_loc, site_delta)


def fk_backward(q, dsites, r_w, rot, parents, offsets, k1, k2, site_seg, site_loc, site_delta):
    """Pull a site-position cotangent [N,S,3] back to (dq [N,D], ddelta [S,3])."""
    q = np.ascontiguousarray(q, dtype=np.float64)
    dsites = np.ascontiguousarray(dsites, dtype=np.float64)
    if _BACKEND == "numba":
        return _fk_backward_nb(q, dsites, r_w, rot, parents, offsets, k1, k2, site_seg, site_loc, site_delta)
    return _fk_backward_np(q, dsites, r_w, rot, parents, offsets, k1, k2, site_seg, site_loc, site_delta)
