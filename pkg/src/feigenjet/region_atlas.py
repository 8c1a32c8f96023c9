"""Geometry of the central domain W, its scalings, Q^(1) and the dyadic sets.

W is the interior of the closure of the four tiles at the origin.  Its
boundary in the first quadrant is the preimage, under the first-quadrant
branch of F, of the real segment (-inf, -1/lam] followed by [1/lam^2, +inf).
Near infinity that boundary runs into the natural boundary of F, so the atlas
uses the inner domain

    W' = {z in W : |F(z)| < level_cap},

whose boundary consists of two traced level-curve pieces joined by the
preimage of a half circle of radius ``level_cap``.  W' is contained in W, so
it is nested under multiplication by lambda and every landing-time statement
about W^(m) stays valid for the smaller sets; with the default cap it still
contains the disk of radius 2.06 around 0 and hence Q^(1) with a wide margin.

All curves are polylines in binary64 (their slack is ~1e-6, far above double
rounding) stored as a first-quadrant chain and mirrored into the other three
quadrants, which makes every predicate exactly symmetric.
"""
from __future__ import annotations

import ast
import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path

import mpmath
import numpy as np
from numba import njit, prange

from . import _geometry as geo
from .fixed_point_solver import FastMap, FeigenbaumMap
from .series_core import DomainExceeded


class TraceStalled(RuntimeError):
    pass


class SingularPoint(RuntimeError):
    pass


class InconsistentAtlas(RuntimeError):
    pass


class DeltaNotFound(RuntimeError):
    pass


class Membership(enum.Enum):
    INSIDE = "inside"
    OUTSIDE = "outside"
    UNKNOWN = "unknown"


class TileColor(enum.IntEnum):
    MINUS = 0
    PLUS = 1
    BOUNDARY = 2


DEFAULT_LEVEL_CAP = 12.0
DEFAULT_MAX_EDGE = 0.005
DEFAULT_COARSE_N = 8
M_MAX = 400
GRID_STEP = 1.0 / 128  # signed-distance table spacing; ambiguous lookups fall back to the exact chain


# -- polylines ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BoundaryPolyline:
    """Closed symmetric polyline given by its first-quadrant chain."""

    chain: np.ndarray
    max_edge_length: float
    hausdorff_slack: float
    closed: bool = True

    @cached_property
    def vertices(self) -> np.ndarray:
        return geo.full_polygon(self.chain)

    @cached_property
    def grid(self) -> geo.SdGrid:
        reach = float(np.abs(self.chain).max()) + 0.5
        return geo.SdGrid(self.chain, GRID_STEP, reach)

    def signed_distance(self, z) -> np.ndarray:
        return self.grid.exact(z)

    def contains(self, z, margin: float = 0.0) -> np.ndarray:
        """Conservative inside test: polyline distance beyond margin plus slack."""
        return self.grid.at_least(z, margin + self.hausdorff_slack)


def _newton(fm: FastMap, z: complex, target: complex, tol: float = 1e-14, iters: int = 40):
    """Solve F(z) = target near z; None when the corrector does not settle.

    Near critical points the attainable accuracy in z is limited by |F'|, so
    the loop also stops when the residual sits at rounding level.
    """
    last = math.inf
    for _ in range(iters):
        f, df = fm.fdf(np.array([z]))
        f, df = complex(f[0]), complex(df[0])
        if not (np.isfinite(f) and np.isfinite(df)) or df == 0:
            return None
        res = abs(f - target)
        step = (f - target) / df
        if res <= 4e-16 * max(1.0, abs(target)) or abs(step) <= tol * max(1.0, abs(z)):
            return z - step
        if res >= last and res <= 1e-12 * max(1.0, abs(target)):
            return z
        last = res
        z -= step
    return None


def _fdf(fm: FastMap, z: complex) -> tuple[complex, complex]:
    f, df = fm.fdf(np.array([z]))
    return complex(f[0]), complex(df[0])


def _continue(fm: FastMap, z: complex, path, s0: float, s1: float, max_edge: float,
              speed: float, skip: float = 1e-9):
    """March the inverse branch along w = path(s) for s in [s0, s1].

    ``speed`` bounds |dw/ds|.  Steps are sized so that |dz| stays below
    max_edge; a corrector failure halves the step.
    """
    zs, ss = [z], [s0]
    s = s0
    while s < s1:
        _, df = _fdf(fm, z)
        if abs(df) < 1e-10:
            raise SingularPoint(f"|F'| = {abs(df):.2e} at {z}")
        ds = min(0.8 * max_edge * abs(df) / speed, s1 - s)
        while True:
            if ds < skip * 1e-6:
                raise TraceStalled(f"step underflow at s = {s}")
            w0, w1 = path(s), path(s + ds)
            pred = z + (w1 - w0) / df
            znew = _newton(fm, pred, w1)
            if znew is not None and abs(znew - z) <= max_edge and abs(znew - pred) < 0.25 * max_edge:
                break
            ds /= 2
        s += ds
        z = znew
        zs.append(z)
        ss.append(s)
    return np.array(zs), np.array(ss)


def _seg_distance(p: complex, a: complex, b: complex) -> float:
    d = b - a
    t = 0.0 if d == 0 else max(0.0, min(1.0, ((p - a) * d.conjugate()).real / abs(d) ** 2))
    return abs(a + t * d - p)


def _imag_axis_root(fmap: FeigenbaumMap, target, lo, hi):
    with mpmath.workprec(fmap.prec):
        f = lambda y: fmap.value(mpmath.mpc(0, y)).real - target  # noqa: E731
        return mpmath.findroot(f, (mpmath.mpf(lo), mpmath.mpf(hi)), solver="anderson")


def _second_deriv(fmap: FeigenbaumMap, x):
    h = mpmath.mpf(2) ** -40
    return ((fmap.deriv(x + h) - fmap.deriv(x - h)) / (2 * h)).real


def special_points(fmap: FeigenbaumMap) -> dict:
    """Critical point x0/lam, its imaginary-axis partner i*y_c and related values."""
    with mpmath.workprec(fmap.prec):
        lam = fmap.lam
        y_q = _imag_axis_root(fmap, fmap.x0 / lam, 0.5, 1.0)
        return {
            "x_c": float(fmap.x0 / lam),
            "y_c": float(y_q / lam),
            "y_q": float(y_q),
            "a": float(fmap.a),
            "v_minus": float(-1 / lam),
            "v_plus": float(1 / lam ** 2),
            "f2_x": float(_second_deriv(fmap, fmap.x0 / lam)),
        }


def trace_W_boundary(fmap: FeigenbaumMap, max_edge: float = DEFAULT_MAX_EDGE,
                     level_cap: float = DEFAULT_LEVEL_CAP):
    """Trace the first-quadrant boundary chain of W' and certify its slack.

    Returns the polyline and the true curve points at the parameter midpoints
    of every edge (used to certify slack of pulled-back curves).
    """
    fm = fmap.fast()
    sp = special_points(fmap)
    xc, yc = sp["x_c"], sp["y_c"]
    vm, vp, cap = sp["v_minus"], sp["v_plus"], float(level_cap)
    if not cap > vp:
        raise ValueError("level cap must exceed 1/lambda^2")
    gap = 1e-8

    def path(s):
        if s <= 1:
            return complex(vm - gap - s * (cap + vm - gap), 0.0)
        if s <= 2:
            return cap * complex(math.cos(math.pi * s), math.sin(math.pi * s))
        return complex(cap - (s - 2) * (cap - vp - gap), 0.0)

    speeds = (cap + vm, math.pi * cap, cap - vp)
    # start just off the critical point: (z - x_c)^2 = 2 (w - F(x_c)) / F''
    z = complex(xc, math.sqrt(2 * gap / sp["f2_x"]))
    z = _newton(fm, z, path(0.0))
    if z is None or z.imag <= 0:
        raise TraceStalled("could not start at the real critical point")
    parts, params = [np.array([complex(xc, 0.0)])], [np.array([-1.0])]
    for k in range(3):
        zs, ss = _continue(fm, z, path, float(k), float(k + 1), max_edge, speeds[k])
        parts.append(zs[1:] if k else zs)
        params.append(ss[1:] if k else ss)
        z = zs[-1]
    chain = np.concatenate(parts + [np.array([complex(0.0, yc)])])
    svals = np.concatenate(params + [np.array([4.0])])
    if np.any(chain.real < -1e-12) or np.any(chain.imag < -1e-12):
        raise TraceStalled("chain left the first quadrant")
    chain = np.concatenate([[complex(xc, 0.0)], chain[1:-1], [complex(0.0, yc)]])

    mids = _midpoints(fm, chain, svals, path)
    dev = max(_seg_distance(m, chain[i], chain[i + 1]) for i, m in enumerate(mids))
    edges = np.abs(np.diff(chain))
    poly = BoundaryPolyline(chain, float(edges.max()), 2.0 * dev + 1e-12)
    return poly, mids, sp


def _midpoints(fm: FastMap, chain, svals, path):
    """True curve points halfway (in the path parameter) along each edge."""
    mids = []
    last = len(chain) - 2
    for i in range(len(chain) - 1):
        a, b = chain[i], chain[i + 1]
        if i == 0 or i == last:
            # edges touching a critical endpoint: the curve is the square-root
            # branch, sample it at the chord midpoint's image value instead
            guess = 0.5 * (a + b)
            target = _fdf(fm, guess)[0].real
            m = _newton(fm, guess, complex(target, 0.0))
            mids.append(m if m is not None else guess)
            continue
        s = 0.5 * (svals[i] + svals[i + 1])
        m = _newton(fm, 0.5 * (a + b), path(s))
        if m is None:
            raise TraceStalled(f"midpoint corrector failed on edge {i}")
        mids.append(m)
    return mids


def trace_Q_boundary(fmap: FeigenbaumMap, W: BoundaryPolyline, W_mids, sp: dict) -> BoundaryPolyline:
    """Pull back the upper half of the W' boundary through F to get the chain of Q^(1)."""
    fm = fmap.fast()
    upper = np.concatenate([W.chain, -np.conj(W.chain[::-1])[1:]])
    upper_mids = list(W_mids) + [-np.conj(m) for m in W_mids[::-1]]
    z = complex(0.0, sp["y_q"])
    pulled = [z]
    for prev_b, b in zip(upper[:-1], upper[1:]):
        # substeps of at most 0.01 in z keep the corrector on the right branch
        f, df = _fdf(fm, z)
        nsub = max(1, int(math.ceil(abs(b - prev_b) / (0.01 * max(abs(df), 1e-3)))))
        for k in range(1, nsub + 1):
            target = prev_b + (b - prev_b) * k / nsub
            znew = _newton(fm, z + (target - f) / df, target)
            if znew is None:
                raise TraceStalled("pullback corrector failed")
            z = znew
            f, df = _fdf(fm, z)
        pulled.append(z)
    pulled = np.array(pulled)
    end = pulled[-1]
    if abs(abs(end.real) - sp["a"]) > 1e-8 or abs(end.imag) > 1e-8:
        raise TraceStalled(f"pullback ended at {end}, expected +-a")

    # slack: pulled-back midpoints against chords, plus W's slack through 1/|F'|
    devs = []
    for i in range(len(upper) - 1):
        a_q, b_q = pulled[i], pulled[i + 1]
        m = _newton(fm, 0.5 * (a_q + b_q), upper_mids[i])
        if m is None:
            raise TraceStalled(f"pullback midpoint failed on edge {i}")
        devs.append(_seg_distance(m, a_q, b_q))
    dfs = np.abs(fm.fdf(pulled)[1])

    if end.real < 0:
        pulled = -np.conj(pulled)
    chain = pulled[::-1].copy()
    chain[0] = complex(sp["a"], 0.0)
    chain[-1] = complex(0.0, sp["y_q"])
    if np.any(chain.real < -1e-12) or np.any(chain.imag < -1e-12):
        raise TraceStalled("Q chain left the first quadrant")
    slack = 2.0 * max(devs) + W.hausdorff_slack / float(dfs.min()) + 1e-12
    edges = np.abs(np.diff(chain))
    return BoundaryPolyline(chain, float(edges.max()), slack)


# -- dyadic square unions ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class DyadicSet:
    """Union of closed squares [i, i+1] x [j, j+1] / 2^q, stored as a mask."""

    q: int
    i0: int
    j0: int
    mask: np.ndarray

    @property
    def side(self) -> float:
        return 2.0 ** -self.q

    def squares(self) -> list[tuple[int, int, int]]:
        ii, jj = np.nonzero(self.mask)
        return [(self.q, int(i) + self.i0, int(j) + self.j0) for i, j in zip(ii, jj)]

    def __len__(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def from_squares(cls, squares) -> "DyadicSet":
        squares = list(squares)
        if not squares:
            raise ValueError("empty dyadic set")
        q = squares[0][0]
        if any(s[0] != q for s in squares):
            raise ValueError("mixed resolutions")
        ii = np.array([s[1] for s in squares])
        jj = np.array([s[2] for s in squares])
        i0, j0 = int(ii.min()), int(jj.min())
        mask = np.zeros((int(ii.max()) - i0 + 1, int(jj.max()) - j0 + 1), dtype=bool)
        mask[ii - i0, jj - j0] = True
        return cls(q, i0, j0, mask)

    def refine(self, q: int) -> "DyadicSet":
        if q < self.q:
            raise ValueError("can only refine")
        k = 1 << (q - self.q)
        return DyadicSet(q, self.i0 * k, self.j0 * k, np.kron(self.mask, np.ones((k, k), dtype=bool)))

    def contains(self, z) -> np.ndarray:
        """Closed-union membership (points on shared edges count as inside)."""
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        return _dyadic_contains(self.mask, self.i0, self.j0, float(2 ** self.q),
                                np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))

    def distance(self, z) -> float:
        """Euclidean distance from a point to the union (exact for dyadic input)."""
        return math.sqrt(float(self.distance2_exact(z)))

    def distance2_exact(self, z) -> Fraction:
        zr = Fraction(float(np.real(z)))
        zi = Fraction(float(np.imag(z)))
        scale = 2 ** self.q
        ii, jj = np.nonzero(self.mask)
        ii = ii + self.i0
        jj = jj + self.j0
        # floating prefilter, then exact comparison among near candidates
        xs, ys = float(zr) * scale, float(zi) * scale
        dx = np.maximum(0, np.maximum(ii - xs, xs - (ii + 1)))
        dy = np.maximum(0, np.maximum(jj - ys, ys - (jj + 1)))
        d2 = dx * dx + dy * dy
        cut = d2.min() + 4.0
        best = None
        for i, j in zip(ii[d2 <= cut], jj[d2 <= cut]):
            x = zr * scale
            y = zi * scale
            ex = max(Fraction(0), Fraction(int(i)) - x, x - (int(i) + 1))
            ey = max(Fraction(0), Fraction(int(j)) - y, y - (int(j) + 1))
            v = ex * ex + ey * ey
            if best is None or v < best:
                best = v
        return best / Fraction(scale * scale)


@njit(cache=True)
def _in_mask(mask, i0, j0, i, j):
    a = i - i0
    b = j - j0
    if a < 0 or b < 0 or a >= mask.shape[0] or b >= mask.shape[1]:
        return False
    return mask[a, b]


@njit(cache=True)
def dyadic_contains_one(mask, i0, j0, scale, x, y):
    sx = x * scale
    sy = y * scale
    i = int(math.floor(sx))
    j = int(math.floor(sy))
    if _in_mask(mask, i0, j0, i, j):
        return True
    ex = sx == i
    ey = sy == j
    if ex and _in_mask(mask, i0, j0, i - 1, j):
        return True
    if ey and _in_mask(mask, i0, j0, i, j - 1):
        return True
    if ex and ey and _in_mask(mask, i0, j0, i - 1, j - 1):
        return True
    return False


@njit(cache=True, parallel=True)
def _dyadic_contains(mask, i0, j0, scale, xs, ys):
    out = np.empty(xs.shape[0], dtype=np.bool_)
    for k in prange(xs.shape[0]):
        out[k] = dyadic_contains_one(mask, i0, j0, scale, xs[k], ys[k])
    return out


# -- J cover by certified escape ---------------------------------------------

@njit(cache=True)
def _majorant(abs_c, r):
    """Bounds on |F'| and |F''| over the disk |z| <= r from the absolute coefficients."""
    r2 = r * r
    d1 = 0.0
    d2 = 0.0
    for k in range(abs_c.shape[0] - 1, 0, -1):
        d1 = d1 * r2 + 2 * k * abs_c[k]
    for k in range(abs_c.shape[0] - 1, 0, -1):
        d2 = d2 * r2 + 2 * k * (2 * k - 1) * abs_c[k]
    return d1 * r, d2


@njit(cache=True)
def _eval_c(c, z):
    t = z * z
    f = c[c.shape[0] - 1] + 0j
    h = (c.shape[0] - 1) * c[c.shape[0] - 1] + 0j
    for k in range(c.shape[0] - 2, -1, -1):
        f = f * t + c[k]
    for k in range(c.shape[0] - 2, 0, -1):
        h = h * t + k * c[k]
    return f, 2 * z * h


@njit(cache=True, parallel=True)
def _escape_disks(cx, cy, r0, c, abs_c, qx, qy, qvals, qh, slack, budget, rmax):
    """For each disk (center, r0): iterations until its enclosure provably leaves Q, or -1."""
    n = cx.shape[0]
    out = np.full(n, -1, dtype=np.int64)
    for k in prange(n):
        z = complex(cx[k], cy[k])
        r = r0[k]
        for it in range(budget):
            lo, hi = geo.sd_interval(qx, qy, qvals, qh, z.real, z.imag)
            if hi < -(r + slack):
                out[k] = it
                break
            if lo <= -(r + slack) and geo.chain_sd(qx, qy, z.real, z.imag) < -(r + slack):
                out[k] = it
                break
            if r > rmax or abs(z) + r > 2.2:
                break
            f, df = _eval_c(c, z)
            _, m2 = _majorant(abs_c, abs(z) + r)
            r = abs(df) * r + 0.5 * m2 * r * r + 1e-15 * (1.0 + abs(f))
            z = f
    return out


def _fmap_arrays(fmap: FeigenbaumMap):
    c = np.ascontiguousarray(fmap.float_coeffs)
    return c, np.abs(c)


def build_j_cover(fmap: FeigenbaumMap, Q: BoundaryPolyline, coarse_n: int = DEFAULT_COARSE_N,
                  budget: int = 400, rmax: float = 0.25) -> DyadicSet:
    """Squares of side 2^-coarse_n that are not certified to escape Q^(1)."""
    h = 2.0 ** -coarse_n
    reach = float(np.abs(Q.vertices.real).max()), float(np.abs(Q.vertices.imag).max())
    ni = int(math.ceil(reach[0] / h)) + 1
    nj = int(math.ceil(reach[1] / h)) + 1
    ii, jj = np.meshgrid(np.arange(-ni, ni), np.arange(-nj, nj), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    centers = (ii + 0.5) * h + 1j * (jj + 0.5) * h
    r0 = np.full(centers.shape, h * math.sqrt(0.5) * (1 + 1e-12))
    c, abs_c = _fmap_arrays(fmap)
    g = Q.grid
    esc = _escape_disks(np.ascontiguousarray(centers.real), np.ascontiguousarray(centers.imag), r0,
                        c, abs_c, g.cx, g.cy, g.vals, g.h, Q.hausdorff_slack, budget, rmax)
    keep = esc < 0
    return DyadicSet.from_squares([(coarse_n, int(i), int(j)) for i, j in zip(ii[keep], jj[keep])])


# -- delta and the sandwich sets ---------------------------------------------

def separation_W_W1(W: BoundaryPolyline, lam: float, subdiv: int = 4) -> float:
    """Lower bound for d(C minus W, W^(1)) measured on the polyline."""
    ch = lam * W.chain
    t = np.linspace(0.0, 1.0, subdiv, endpoint=False)
    pts = (ch[:-1, None] + (ch[1:, None] - ch[:-1, None]) * t[None, :]).ravel()
    pts = np.concatenate([pts, ch[-1:]])
    gaps = np.abs(np.diff(ch)).max() / subdiv
    d = float(W.signed_distance(pts).min())
    return d - gaps / 2 - W.hausdorff_slack * (1 + lam)


def _image_inside_Q(fmap: FeigenbaumMap, Q: BoundaryPolyline, centers, radius) -> bool:
    c, abs_c = _fmap_arrays(fmap)
    fm = fmap.fast()
    f, df = fm.fdf(centers)
    r = np.abs(centers) + radius
    m2 = np.array([_majorant(abs_c, float(x))[1] for x in r])
    rad = np.abs(df) * radius + 0.5 * m2 * radius ** 2 + 1e-14
    return bool(np.all(Q.grid.at_least(f, rad + Q.hausdorff_slack)))


def choose_delta(fmap: FeigenbaumMap, W: BoundaryPolyline, Q: BoundaryPolyline, cover: DyadicSet,
                 q_max: int = 16) -> tuple[float, float]:
    lam = float(fmap.lam)
    sep = separation_W_W1(W, lam)
    sq = np.array(cover.squares())
    centers = (sq[:, 1] + 0.5) * cover.side + 1j * (sq[:, 2] + 0.5) * cover.side
    half_diag = cover.side * math.sqrt(0.5)
    for q in range(1, q_max + 1):
        delta = 2.0 ** -q
        if not delta < 0.5 * sep:
            continue
        if _image_inside_Q(fmap, Q, centers, half_diag + delta):
            return delta, sep
    raise DeltaNotFound(f"no dyadic delta down to 2^-{q_max}")


def _grid_squares(lo: complex, hi: complex, q: int):
    s = 2.0 ** -q
    i = np.arange(int(math.floor(lo.real / s)) - 1, int(math.ceil(hi.real / s)) + 1)
    j = np.arange(int(math.floor(lo.imag / s)) - 1, int(math.ceil(hi.imag / s)) + 1)
    return i, j


def build_U1(Q: BoundaryPolyline, delta: float) -> DyadicSet:
    """Squares of side delta/8 whose centers lie within half a diagonal (plus slack) of Q."""
    q = int(round(-math.log2(delta))) + 3
    s = 2.0 ** -q
    reach = complex(np.abs(Q.vertices.real).max(), np.abs(Q.vertices.imag).max()) + complex(delta, delta)
    i, j = _grid_squares(-reach, reach, q)
    ii, jj = np.meshgrid(i, j, indexing="ij")
    centers = ((ii + 0.5) * s + 1j * (jj + 0.5) * s).ravel()
    inside = Q.grid.at_least(centers, -(s * math.sqrt(0.5) + Q.hausdorff_slack))
    mask = inside.reshape(ii.shape)
    return DyadicSet(q, int(i[0]), int(j[0]), mask)


def _gap_footprint(radius_units: float) -> np.ndarray:
    """Offsets (a, b) between unit cells whose closed-square gap is <= radius."""
    r = int(math.floor(radius_units)) + 1
    a = np.arange(-r, r + 1)
    ga = np.maximum(0, np.abs(a) - 1)
    g2 = ga[:, None] ** 2 + ga[None, :] ** 2
    return g2 <= radius_units ** 2


def build_U2(cover: DyadicSet, delta: float) -> DyadicSet:
    """Squares of side delta/8 within distance delta/4 of the cover (exact integer geometry)."""
    from scipy import ndimage

    q2 = int(round(-math.log2(delta))) + 3
    qf = max(q2, cover.q)
    fine = cover.refine(qf)
    units = (delta / 4) / 2.0 ** -qf
    if units != int(units):
        raise ValueError("delta/4 must be a whole number of fine cells")
    fp = _gap_footprint(units)
    pad = fp.shape[0]
    m = np.pad(fine.mask, pad)
    dil = ndimage.binary_dilation(m, structure=fp)
    i0, j0 = fine.i0 - pad, fine.j0 - pad
    k = 1 << (qf - q2)
    # align the fine grid to blocks of the U2 resolution
    si = (-i0) % k
    sj = (-j0) % k
    dil = np.pad(dil, ((si, (-(dil.shape[0] + si)) % k), (sj, (-(dil.shape[1] + sj)) % k)))
    i0 -= si
    j0 -= sj
    blocks = dil.reshape(dil.shape[0] // k, k, dil.shape[1] // k, k).any(axis=(1, 3))
    return DyadicSet(q2, i0 // k, j0 // k, blocks)


# -- the atlas ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RegionAtlas:
    W_boundary: BoundaryPolyline
    Q_boundary: BoundaryPolyline
    lam: float
    delta: float
    U1: DyadicSet
    U2: DyadicSet
    U3: DyadicSet
    J_cover: DyadicSet
    epsilon: float
    meta: dict = field(default_factory=dict)

    @property
    def hausdorff_slack(self) -> float:
        return self.W_boundary.hausdorff_slack

    @cached_property
    def inner_radius(self) -> float:
        """Radius of a disk around 0 inside W (from the polyline, minus slack)."""
        return float(np.abs(self.W_boundary.vertices).min()) - self.W_boundary.max_edge_length - self.hausdorff_slack


def membership(atlas: RegionAtlas, z, m: int, margin: float) -> Membership:
    """Is z in W^(m) = lam^m W?  ``margin`` is measured in the z-plane."""
    lm = atlas.lam ** m
    if not margin > 2 * atlas.hausdorff_slack * lm:
        raise ValueError("margin must exceed twice the scaled polyline slack")
    u = complex(z) / lm
    sd = float(atlas.W_boundary.signed_distance(u)[0]) * lm
    if sd > margin:
        return Membership.INSIDE
    if sd < -margin:
        return Membership.OUTSIDE
    return Membership.UNKNOWN


def select_mtilde(atlas: RegionAtlas, p, point_err: float = 0.0, m_max: int = M_MAX):
    """Smallest m with U_{delta/4}(p/lam^m) in W and U_{delta/2}(p/lam^m) not in W^(1).

    Both conditions are decided conservatively against the polyline, with the
    slack and the point's error bound (scaled) added on the safe side.
    Returns None when p is not in U1.
    """
    p = complex(p)
    if not bool(atlas.U1.contains(p)[0]):
        return None
    return _select_mtilde(atlas, p, point_err, m_max)


def _select_mtilde(atlas: RegionAtlas, p: complex, point_err: float, m_max: int):
    lam, delta, slack = atlas.lam, atlas.delta, atlas.hausdorff_slack
    W = atlas.W_boundary
    r_in = atlas.inner_radius
    m = 0
    ap = abs(p) + point_err
    if ap > 0:
        # every m with |p/lam^(m+1)| deep inside W fails the second condition
        k = math.floor(math.log(ap / (r_in - delta / (2 * lam) - slack)) / math.log(lam)) - 1
        m = max(0, min(k, m_max))
    else:
        m = m_max
    start, best = m, -1
    while m <= m_max:
        u = p / lam ** m
        e = point_err / lam ** m
        if not bool(W.grid.at_least(u, delta / 4 + slack + e)[0]):
            break
        best = m
        u1 = u / lam
        if m == m_max or not bool(W.grid.at_least(u1, delta / (2 * lam) - slack - e / lam)[0]):
            return m
        m += 1
    if best >= 0:
        # the point error hides the exit level: deepest certified level instead
        return best
    for m in range(start - 1, -1, -1):
        if bool(W.grid.at_least(p / lam ** m, delta / 4 + slack + point_err / lam ** m)[0]):
            return m
    raise InconsistentAtlas(f"no admissible level for p = {p}")


def build_atlas(fmap: FeigenbaumMap, coarse_n: int = DEFAULT_COARSE_N, max_edge: float = DEFAULT_MAX_EDGE,
                level_cap: float = DEFAULT_LEVEL_CAP) -> RegionAtlas:
    W, W_mids, sp = trace_W_boundary(fmap, max_edge, level_cap)
    Q = trace_Q_boundary(fmap, W, W_mids, sp)
    cover = build_j_cover(fmap, Q, coarse_n)
    delta, sep = choose_delta(fmap, W, Q, cover)
    return build_dyadic_sets(fmap, W, Q, cover, delta, sep, sp, level_cap)


def build_dyadic_sets(fmap, W, Q, cover, delta, sep, sp, level_cap) -> RegionAtlas:
    if not W.hausdorff_slack < delta / 8 or not Q.hausdorff_slack < delta / 8:
        raise InconsistentAtlas("polyline slack not below delta/8")
    U1 = build_U1(Q, delta)
    U2 = build_U2(cover, delta)
    U3 = cover
    lam = float(fmap.lam)
    epsilon = _epsilon_substitute(cover, delta, lam)
    meta = {
        "level_cap": level_cap,
        "separation_W_W1": sep,
        "x_c": sp["x_c"], "y_c": sp["y_c"], "y_q": sp["y_q"], "a": sp["a"],
        "epsilon_kind": "substitute",
        "coarse_n": cover.q,
    }
    return RegionAtlas(W, Q, lam, delta, U1, U2, U3, cover, epsilon, meta)


def _epsilon_substitute(cover: DyadicSet, delta: float, lam: float) -> float:
    """lam times the height above the real axis at which the cover's delta-neighbourhood ends.

    Stand-in for lam * d(W minus S^(1), R): the auxiliary tiles next to the
    real axis are not traced, so the real-axis neighbourhood they would bound
    is replaced by the thinnest part of the delta-inflated J cover.
    """
    sq = np.array(cover.squares())
    s = cover.side
    # per column, the top of the highest cover square
    tops = {}
    for _, i, j in sq:
        tops[i] = max(tops.get(i, -1e9), (j + 1) * s)
    return lam * (min(tops.values()) + delta)


# -- tile colouring ----------------------------------------------------------

def tile_color(fmap: FeigenbaumMap, z, resolution: float = 1e-9) -> TileColor:
    fm = fmap.fast()
    f, df = fm.fdf(np.array([complex(z)]))
    if not np.isfinite(f[0]):
        raise DomainExceeded(f"F not evaluable at {z}")
    return TileColor(int(tile_raster_values(f, df, resolution)[0]))


def tile_raster_values(f, df, resolution: float) -> np.ndarray:
    out = np.full(f.shape, int(TileColor.BOUNDARY), dtype=np.uint8)
    ok = np.isfinite(f) & np.isfinite(df)
    thr = resolution * np.abs(df) + 1e-13 * np.abs(f)
    out[ok & (f.imag > thr)] = TileColor.PLUS
    out[ok & (f.imag < -thr)] = TileColor.MINUS
    return out


def tile_raster(fmap: FeigenbaumMap, xs: np.ndarray, ys: np.ndarray, chunk: int = 1 << 18) -> np.ndarray:
    """Colours on the grid xs (columns) by ys (rows); rows ordered as given."""
    fm = fmap.fast()
    pix = float(abs(xs[1] - xs[0])) if len(xs) > 1 else 1e-9
    zz = (xs[None, :] + 1j * ys[:, None]).ravel()
    out = np.empty(zz.shape, dtype=np.uint8)
    for s in range(0, zz.size, chunk):
        part = zz[s:s + chunk]
        # evaluate on the first quadrant and mirror: exact symmetry of the raster
        f, df = fm.fdf(np.abs(part.real) + 1j * np.abs(part.imag))
        vals = tile_raster_values(f, df, 0.5 * pix)
        flip = np.sign(part.real) * np.sign(part.imag) < 0
        swap = vals.copy()
        swap[vals == TileColor.PLUS] = TileColor.MINUS
        swap[vals == TileColor.MINUS] = TileColor.PLUS
        vals = np.where(flip, swap, vals)
        out[s:s + chunk] = vals
    return out.reshape(len(ys), len(xs))


# -- cache -------------------------------------------------------------------

def save_atlas(atlas: RegionAtlas, path: str | Path) -> None:
    lines = ["FEIGW 1", f"lambda {float(atlas.lam)!r}"]
    for name, poly in (("W", atlas.W_boundary), ("Q", atlas.Q_boundary)):
        v = poly.vertices
        lines.append(f"{name} {len(v)} {float(poly.hausdorff_slack)!r} {float(poly.max_edge_length)!r}")
        lines += [f"{float(x.real)!r} {float(x.imag)!r}" for x in v]
    lines.append(f"delta {float(atlas.delta)!r}")
    lines.append(f"epsilon {float(atlas.epsilon)!r}")
    for name in ("U1", "U2", "U3", "J_cover"):
        ds = getattr(atlas, name)
        sq = ds.squares()
        lines.append(f"{name} {len(sq)}")
        lines += [f"{q} {i} {j}" for q, i, j in sq]
    for k in sorted(atlas.meta):
        v = atlas.meta[k]
        lines.append(f"meta {k} {(v if isinstance(v, (str, int)) else float(v))!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_atlas(path: str | Path) -> RegionAtlas:
    it = iter(Path(path).read_text(encoding="utf-8").splitlines())
    if next(it).strip() != "FEIGW 1":
        raise ValueError(f"{path}: bad atlas header")
    lam = float(next(it).split()[1])
    polys = {}
    for _ in range(2):
        name, count, slack, edge = next(it).split()
        v = np.array([complex(*map(float, next(it).split())) for _ in range(int(count))])
        n = len(v) // 4 + 1
        chain = v[:n]
        if not np.array_equal(geo.full_polygon(chain), v):
            raise ValueError(f"{path}: polyline {name} is not symmetric")
        polys[name] = BoundaryPolyline(chain, float(edge), float(slack))
    delta = float(next(it).split()[1])
    epsilon = float(next(it).split()[1])
    sets = {}
    for _ in range(4):
        name, count = next(it).split()
        sets[name] = DyadicSet.from_squares([tuple(map(int, next(it).split())) for _ in range(int(count))])
    meta = {}
    for line in it:
        _, k, v = line.split(" ", 2)
        meta[k] = ast.literal_eval(v)
    return RegionAtlas(polys["W"], polys["Q"], lam, delta, sets["U1"], sets["U2"], sets["U3"],
                       sets["J_cover"], epsilon, meta)
