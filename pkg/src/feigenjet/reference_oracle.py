"""Brute-force reference for pixel decisions, by direct iteration of F.

No shortcut and no atlas sets are used, only the map itself and the traced
boundary of Q^(1), on which F is quadratic-like (so K lies inside Q^(1) and a
point that leaves it escapes).

Per cell centre c two independent bounds on d(c, J) are computed:

* lower: the largest radius r on an ascending ladder (sqrt2, 2, 4, 8 times
  2^-n-2, stopping at the first failure) for which the disk D(c, r) is
  carried out of Q^(1) by direct iteration with a certified enclosure
  (value plus Taylor remainder).  Then D(c, r) misses K.  Radii below
  2^-n-2 never change a pixel verdict and are not tried.
* upper: distance to the nearest of many exact preimages z* of points x of
  the real interval [-lam, 1].  That interval is forward invariant (F is even
  and decreasing on [0, 1] with F(0) = 1, F(1) = -lam), so it lies in K = J.
  Each z* is found from a start point on a grid finer than the cells by
  following its orbit, picking iterates F^k closest to the interval relative
  to the accumulated derivative, and solving F^k(z) = Re F^k by Newton's
  method on the composition.

The iteration counts consumed are kept; they are the naive side of the
benchmark.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import _geometry as geo
from . import region_atlas as ra
from .fixed_point_solver import FeigenbaumMap
from .region_atlas import RegionAtlas

UNKNOWN = 0
FAR = 1
NEAR = 2

_ESCAPE_RADIUS = 2.2  # the series is only trusted inside this radius
_LADDER = np.array([math.sqrt(2.0), 2.0, 4.0, 8.0])  # candidate radii, in units of 2^-n-2
_MAX_WORK = 20000  # disk steps per escape certificate, over all split pieces


@dataclass
class ReferenceOracle:
    """Per-cell distance certificates on the pixel grid of precision ``n_ref``.

    Cell (row j, column i) has centre ((i0 + i) + (j0 + j) i) / 2^(n_ref + 2).
    ``lower`` is 0 where no escape certificate exists and ``upper`` is inf
    where no preimage was found.
    """

    n_ref: int
    i0: int
    j0: int
    lower: np.ndarray
    upper: np.ndarray
    in_q: np.ndarray
    iterations: np.ndarray
    budget: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.lower.shape

    @property
    def spacing(self) -> float:
        return 2.0 ** -(self.n_ref + 2)

    def centers(self) -> np.ndarray:
        return cell_centers(self.i0, self.j0, self.shape[1], self.shape[0], self.n_ref)

    @property
    def status(self) -> np.ndarray:
        """NEAR where filling is certified valid, FAR where blank is, else UNKNOWN."""
        r1 = self.spacing
        out = np.full(self.shape, UNKNOWN, dtype=np.int8)
        out[self.lower > r1] = FAR
        out[self.upper < 2 * r1] = NEAR
        return out

    def unknown_fraction(self) -> float:
        """Fraction of cells inside Q^(1) that carry no certificate."""
        cells = self.in_q.sum()
        if cells == 0:
            return 0.0
        return float(((self.status == UNKNOWN) & self.in_q).sum() / cells)

    def violations(self, image: np.ndarray) -> dict:
        """Cells where the image contradicts a certificate.

        A filled cell is wrong when d(c, J) >= 2^-n-1 is certified, a blank
        one when d(c, J) <= 2^-n-2 is certified.
        """
        image = np.asarray(image, dtype=bool)
        if image.shape != self.shape:
            raise ValueError(f"image shape {image.shape} does not match oracle {self.shape}")
        r1 = self.spacing
        filled_far = image & (self.lower >= 2 * r1)
        blank_near = ~image & (self.upper <= r1)
        return {"filled_far": int(filled_far.sum()), "blank_near": int(blank_near.sum()),
                "filled_far_cells": np.argwhere(filled_far), "blank_near_cells": np.argwhere(blank_near)}


def cell_centers(i0: int, j0: int, ni: int, nj: int, n: int) -> np.ndarray:
    """Row-major (j, i) grid of pixel centres at precision n."""
    s = 2.0 ** -(n + 2)
    i = np.arange(i0, i0 + ni)
    j = np.arange(j0, j0 + nj)
    return (i[None, :] * s) + 1j * (j[:, None] * s)


# -- direct iteration kernels ------------------------------------------------

@njit(cache=True)
def _preimage_targets(zx, zy, c, qx, qy, qvals, qh, budget, lo_x, hi_x, keep):
    """Follow z until it leaves Q and keep the ``keep`` best landings F^k(z) ~ x.

    A landing is scored by |Im F^k(z)| / |DF^k(z)|, the first-order distance
    to a preimage of the real point Re F^k(z).  Returns (ks, xs, iterations).
    """
    z = complex(zx, zy)
    dz = 1.0 + 0j
    ks = np.full(keep, -1, dtype=np.int64)
    xs = np.zeros(keep)
    sc = np.full(keep, np.inf)
    k = 0
    while k < budget:
        if lo_x <= z.real <= hi_x and dz != 0:  # dz = 0 after passing the critical point
            score = abs(z.imag) / abs(dz)
            worst = np.argmax(sc)
            if score < sc[worst]:
                sc[worst] = score
                ks[worst] = k
                xs[worst] = z.real
        lo, hi = geo.sd_interval(qx, qy, qvals, qh, z.real, z.imag)
        if abs(z) > _ESCAPE_RADIUS or hi < 0.0 or (lo < 0.0 and geo.chain_sd(qx, qy, z.real, z.imag) < 0.0):
            break
        f, df = ra._eval_c(c, z)
        dz = dz * df
        z = f
        k += 1
    return ks, xs, k


@njit(cache=True)
def _compose(c, z, k):
    dz = 1.0 + 0j
    for _ in range(k):
        if abs(z) > _ESCAPE_RADIUS:
            return z, 0j, False
        f, df = ra._eval_c(c, z)
        dz = dz * df
        z = f
    return z, dz, True


@njit(cache=True)
def _newton_preimage(zx, zy, c, k, x):
    """Solve F^k(z) = x from z; returns (z, converged)."""
    z = complex(zx, zy)
    for _ in range(60):
        fz, dz, ok = _compose(c, z, k)
        if not ok or dz == 0:
            return z, False
        step = (fz - x) / dz
        z = z - step
        if abs(step) <= 4e-16 * (1.0 + abs(z)):
            fz, dz, ok = _compose(c, z, k)
            return z, ok and abs(fz - x) <= 1e-9
    return z, False


@njit(cache=True, parallel=True)
def _preimages(xs, ys, c, qx, qy, qvals, qh, budget, lo_x, hi_x, keep):
    n = xs.shape[0]
    pts = np.full((n, keep), np.nan + 0j)
    iters = np.zeros(n, dtype=np.int64)
    for t in prange(n):
        ks, xt, used = _preimage_targets(xs[t], ys[t], c, qx, qy, qvals, qh, budget, lo_x, hi_x, keep)
        iters[t] = used
        for q in range(keep):
            k = ks[q]
            if k < 0:
                continue
            if k == 0:
                pts[t, q] = complex(xs[t], 0.0)
                continue
            z, ok = _newton_preimage(xs[t], ys[t], c, k, xt[q])
            iters[t] += 8 * k
            if ok:
                pts[t, q] = z
    return pts, iters


_HEX = np.array([0j] + [0.8660254037844387 * complex(math.cos(k * math.pi / 3), math.sin(k * math.pi / 3))
                        for k in range(6)])
_HEX_RADIUS = 0.505  # seven disks of this relative radius at _HEX cover the unit disk
_SPLIT_RADIUS = 0.01


@njit(cache=True)
def _outside(qx, qy, qvals, qh, z, margin):
    lo, hi = geo.sd_interval(qx, qy, qvals, qh, z.real, z.imag)
    if hi < -margin:
        return True
    if lo >= -margin:
        return False
    return geo.chain_sd(qx, qy, z.real, z.imag) < -margin


@njit(cache=True)
def _disk_escapes(zx, zy, r0, c, abs_c, qx, qy, qvals, qh, slack, budget, max_work):
    """Certify that D(z, r0) leaves Q^(1) under iteration; returns (ok, iterations).

    The image of a disk is enclosed in a disk of radius |F'| r + M2 r^2 / 2.
    Once a disk is large and the quadratic part is no longer small it is
    covered by seven half-size disks that are followed separately, which
    keeps the enclosures tight near the exit.
    """
    cap = 4096
    sz = np.empty(cap, dtype=np.complex128)
    sr = np.empty(cap)
    sk = np.empty(cap, dtype=np.int64)
    sz[0] = complex(zx, zy)
    sr[0] = r0
    sk[0] = 0
    top = 1
    work = 0
    while top > 0:
        top -= 1
        z = sz[top]
        r = sr[top]
        k = sk[top]
        while True:
            if _outside(qx, qy, qvals, qh, z, r + slack):
                break
            if k >= budget or work >= max_work or abs(z) + r > _ESCAPE_RADIUS:
                return False, work
            f, df = ra._eval_c(c, z)
            _, m2 = ra._majorant(abs_c, abs(z) + r)
            lin = abs(df) * r
            quad = 0.5 * m2 * r * r
            if r > _SPLIT_RADIUS and quad > 0.05 * lin:
                if top + 7 > cap:
                    return False, work
                for h in range(7):
                    sz[top] = z + r * _HEX[h]
                    sr[top] = r * _HEX_RADIUS
                    sk[top] = k
                    top += 1
                break
            r = lin + quad + 1e-15 * (1.0 + abs(f))
            z = f
            k += 1
            work += 1
    return True, work


@njit(cache=True, parallel=True)
def _escape_many(xs, ys, r0, c, abs_c, qx, qy, qvals, qh, slack, budget, max_work):
    n = xs.shape[0]
    ok = np.empty(n, dtype=np.bool_)
    work = np.empty(n, dtype=np.int64)
    for t in prange(n):
        ok[t], work[t] = _disk_escapes(xs[t], ys[t], r0[t], c, abs_c, qx, qy, qvals, qh, slack,
                                       budget, max_work)
    return ok, work


def _escape(fmap: FeigenbaumMap, atlas: RegionAtlas, z: np.ndarray, r: np.ndarray, budget: int):
    c, abs_c = ra._fmap_arrays(fmap)
    g = atlas.Q_boundary.grid
    return _escape_many(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag),
                        np.ascontiguousarray(r), c, abs_c, g.cx, g.cy, g.vals, g.h,
                        atlas.Q_boundary.hausdorff_slack, budget, _MAX_WORK)


def lower_bounds(fmap: FeigenbaumMap, atlas: RegionAtlas, z, n: int, budget: int):
    """Certified lower bounds on d(z, J) from escaping disks, and iterations consumed."""
    z = np.atleast_1d(np.asarray(z, dtype=complex)).ravel()
    ladder = _LADDER * 2.0 ** -(n + 2)
    out = np.zeros(z.shape)
    iters = np.zeros(z.shape, dtype=np.int64)
    idx = np.arange(z.size)
    for r in ladder:
        if not idx.size:
            break
        ok, work = _escape(fmap, atlas, z[idx], np.full(idx.size, r * (1 + 1e-12)), budget)
        iters[idx] += work
        out[idx[ok]] = r
        idx = idx[ok]
    # outside Q^(1) the distance to the boundary polyline is itself a bound
    Q = atlas.Q_boundary
    outside = -Q.signed_distance(z) - Q.hausdorff_slack
    return np.maximum(out, outside), iters


def j_points(fmap: FeigenbaumMap, atlas: RegionAtlas, starts, budget: int, keep: int = 6):
    """Exact preimages of the invariant real interval found from the given starts.

    Returns (points, iterations per start); every returned point lies in J up
    to the Newton residual (|F^k(z) - x| <= 1e-9 with |DF^k| large).
    """
    starts = np.atleast_1d(np.asarray(starts, dtype=complex)).ravel()
    c, _ = ra._fmap_arrays(fmap)
    g = atlas.Q_boundary.grid
    lam = float(fmap.lam)
    pts, iters = _preimages(np.ascontiguousarray(starts.real), np.ascontiguousarray(starts.imag), c,
                            g.cx, g.cy, g.vals, g.h, budget, -lam, 1.0, keep)
    pts = pts.ravel()
    return pts[np.isfinite(pts)], iters


def upper_bounds(fmap: FeigenbaumMap, atlas: RegionAtlas, z, points) -> np.ndarray:
    """d(z, J) <= distance to the nearest certified J point."""
    from scipy.spatial import cKDTree

    z = np.atleast_1d(np.asarray(z, dtype=complex)).ravel()
    if len(points) == 0:
        return np.full(z.shape, np.inf)
    tree = cKDTree(np.c_[points.real, points.imag])
    d, _ = tree.query(np.c_[z.real, z.imag])
    return d * (1 + 1e-9) + 1e-13


def build_reference(n_ref: int, fmap: FeigenbaumMap, atlas: RegionAtlas, i0: int, j0: int,
                    ni: int, nj: int, budget: int | None = None, density: int = 2) -> ReferenceOracle:
    """Certificates for the ni x nj cells starting at pixel index (i0, j0).

    J points are collected by Newton from a grid of starts ``density`` times
    finer than the cells, extended by 2^-n_ref around the frame.
    """
    if n_ref > 12:
        raise ValueError("the brute-force reference is limited to n_ref <= 12")
    budget = budget or 2 ** (n_ref + 6)
    cent = cell_centers(i0, j0, ni, nj, n_ref)
    flat = cent.ravel()
    lower, iters = lower_bounds(fmap, atlas, flat, n_ref, budget)
    margin = 4 * density
    starts = cell_centers(density * i0 - margin, density * j0 - margin, density * ni + 2 * margin,
                          density * nj + 2 * margin, n_ref + int(math.log2(density)))
    pts, it_up = j_points(fmap, atlas, starts, budget)
    upper = upper_bounds(fmap, atlas, flat, pts)
    iters = iters + int(it_up.sum()) // flat.size
    in_q = atlas.Q_boundary.grid.exact(flat) > 0
    return ReferenceOracle(n_ref, i0, j0, lower.reshape(nj, ni), upper.reshape(nj, ni),
                           in_q.reshape(nj, ni), iters.reshape(nj, ni), budget)


__all__ = ["FAR", "NEAR", "UNKNOWN", "ReferenceOracle", "build_reference", "cell_centers", "j_points",
           "lower_bounds", "upper_bounds"]
