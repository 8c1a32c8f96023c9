"""Compiled planar geometry shared by the atlas and the classifier kernel.

Regions symmetric under z -> -z and z -> conj(z) are described by a
first-quadrant chain: a polyline from a point on the positive real axis to a
point on the positive imaginary axis.  Points are folded into the closed first
quadrant before any test, which makes every predicate exactly symmetric.

Signed distances are positive inside.  ``SdGrid`` tabulates the chain's signed
distance on a regular grid; since the signed distance is 1-Lipschitz a grid
lookup yields an interval, and the exact chain computation is used only when
that interval straddles the threshold being tested.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

SQRT_HALF = math.sqrt(0.5)


@njit(cache=True)
def _seg_dist2(px, py, ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    den = dx * dx + dy * dy
    t = 0.0
    if den > 0.0:
        t = ((px - ax) * dx + (py - ay) * dy) / den
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    qx = ax + t * dx - px
    qy = ay + t * dy - py
    return qx * qx + qy * qy


@njit(cache=True)
def chain_sd(cx, cy, px, py):
    """Signed distance from (px, py) to the symmetric region bounded by the chain."""
    px = abs(px)
    py = abs(py)
    best = np.inf
    crossings = 0
    n = cx.shape[0]
    for k in range(n - 1):
        ax = cx[k]
        ay = cy[k]
        bx = cx[k + 1]
        by = cy[k + 1]
        d2 = _seg_dist2(px, py, ax, ay, bx, by)
        if d2 < best:
            best = d2
        if (ay > py) != (by > py):
            xi = ax + (py - ay) * (bx - ax) / (by - ay)
            if xi > px:
                crossings += 1
    d = math.sqrt(best)
    if crossings % 2 == 1:
        return d
    return -d


@njit(cache=True, parallel=True)
def chain_sd_many(cx, cy, xs, ys):
    out = np.empty(xs.shape[0])
    for i in prange(xs.shape[0]):
        out[i] = chain_sd(cx, cy, xs[i], ys[i])
    return out


@njit(cache=True, parallel=True)
def build_grid(cx, cy, h, nx, ny):
    vals = np.empty((nx, ny))
    for i in prange(nx):
        for j in range(ny):
            vals[i, j] = chain_sd(cx, cy, i * h, j * h)
    return vals


@njit(cache=True)
def sd_interval(cx, cy, vals, h, px, py):
    """Interval (lo, hi) containing the signed distance, from the nearest grid node."""
    px = abs(px)
    py = abs(py)
    i = int(px / h + 0.5)
    j = int(py / h + 0.5)
    if i >= vals.shape[0] or j >= vals.shape[1]:
        d = chain_sd(cx, cy, px, py)
        return d, d
    ex = px - i * h
    ey = py - j * h
    r = math.sqrt(ex * ex + ey * ey) * (1.0 + 1e-12) + 1e-15
    v = vals[i, j]
    return v - r, v + r


@njit(cache=True)
def sd_at_least(cx, cy, vals, h, px, py, thr):
    """True iff the signed distance is >= thr (grid first, exact on ambiguity)."""
    lo, hi = sd_interval(cx, cy, vals, h, px, py)
    if lo >= thr:
        return True
    if hi < thr:
        return False
    return chain_sd(cx, cy, px, py) >= thr


@njit(cache=True, parallel=True)
def sd_at_least_many(cx, cy, vals, h, xs, ys, thr):
    out = np.empty(xs.shape[0], dtype=np.bool_)
    for i in prange(xs.shape[0]):
        out[i] = sd_at_least(cx, cy, vals, h, xs[i], ys[i], thr[i])
    return out


@njit(cache=True, parallel=True)
def sd_lower_many(cx, cy, vals, h, xs, ys):
    """Grid lower bounds on the signed distance (cheap, conservative)."""
    out = np.empty(xs.shape[0])
    for i in prange(xs.shape[0]):
        out[i] = sd_interval(cx, cy, vals, h, xs[i], ys[i])[0]
    return out


@njit(cache=True, parallel=True)
def sd_upper_many(cx, cy, vals, h, xs, ys):
    out = np.empty(xs.shape[0])
    for i in prange(xs.shape[0]):
        out[i] = sd_interval(cx, cy, vals, h, xs[i], ys[i])[1]
    return out


class SdGrid:
    """Tabulated signed distance to a symmetric chain region."""

    def __init__(self, chain: np.ndarray, h: float, reach: float):
        self.chain = np.asarray(chain, dtype=complex)
        self.cx = np.ascontiguousarray(self.chain.real)
        self.cy = np.ascontiguousarray(self.chain.imag)
        self.h = float(h)
        n = int(math.ceil(reach / h)) + 2
        self.vals = build_grid(self.cx, self.cy, self.h, n, n)

    def exact(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=complex)).ravel()
        return chain_sd_many(self.cx, self.cy, np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))

    def at_least(self, z, thr) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=complex)).ravel()
        thr = np.broadcast_to(np.asarray(thr, dtype=float), z.shape).copy()
        return sd_at_least_many(self.cx, self.cy, self.vals, self.h,
                                np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag), thr)

    def lower(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=complex)).ravel()
        return sd_lower_many(self.cx, self.cy, self.vals, self.h,
                             np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))

    def upper(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=complex)).ravel()
        return sd_upper_many(self.cx, self.cy, self.vals, self.h,
                             np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))


def full_polygon(chain: np.ndarray) -> np.ndarray:
    """Closed counter-clockwise polygon from a first-quadrant chain (real axis -> imaginary axis)."""
    q1 = np.asarray(chain, dtype=complex)
    q2 = -np.conj(q1[::-1])
    q3 = -q1
    q4 = np.conj(q1[::-1])
    return np.concatenate([q1, q2[1:], q3[1:], q4[1:-1]])
