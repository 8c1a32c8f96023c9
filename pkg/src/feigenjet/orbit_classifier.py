"""Accelerated orbit classifier and pixel decisions.

The orbit of a point z in U2 is followed with the renormalization shortcut:
at p the level m~ is read off the atlas, r = max(0, m~ - 1) and

    p' = (-lam)^r F(p / lam^r),   d' = |F'(p / lam^r)| d,

which replaces 2^r plain iterates by one evaluation.  The loop stops when p
leaves U1; the accumulated derivative d at the last iterate inside U1 then
decides between "near J" (0) and "far from J" (1).  Exhausting the step
budget answers 0.

Two implementations share the same arithmetic contract: a compiled batch
kernel in double-double arithmetic (about 106 bits) and an mpmath path used
for traces and as the escalation target when the kernel's certified error
would exceed the precision mandate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import mpmath
import numpy as np
from numba import njit, prange

from . import _geometry as geo
from . import region_atlas as ra
from . import series_core as sc
from .fixed_point_solver import FeigenbaumMap
from .region_atlas import RegionAtlas

STATUS_EXIT = 0
STATUS_EXHAUSTED = 1
STATUS_PRECISION = 2

_DD_EPS = 2.0 ** -100  # per-operation relative error charged to double-double work
_LOG2_NEG_INF = -1.0e300
SQRT_HALF = math.sqrt(0.5)


class PrecisionExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassifierConstants:
    A: float
    B: float
    K1: float
    K2: float
    c_far: float = 1.0

    def __post_init__(self):
        for name in ("A", "B", "K1", "K2", "c_far"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def K(self) -> float:
        return self.K1 / (self.K2 + 1)

    def max_steps(self, n: int) -> int:
        return int(math.floor((self.A * n + self.B) ** 2)) + 2

    def level_budget(self, n: int) -> float:
        return self.A * n + self.B

    def log2_threshold(self, n: int) -> float:
        """log2 of K2 2^n + 1, the derivative size that means "near"."""
        return math.log2(self.K2 * 2.0 ** n + 1)

    def mandate(self, n: int, lam: float, delta: float) -> float:
        return lam ** (self.A * n + self.B + 3) * delta


@dataclass
class OrbitState:
    p: mpmath.mpc
    d: mpmath.mpf
    s_tilde: int
    i: int
    m_tilde: int | None
    err_budget: mpmath.mpf


class Terminated:
    """Returned by orbit_step when the current point is outside U1."""

    def __repr__(self):
        return "Terminated"


TERMINATED = Terminated()


# -- kernel data -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KernelData:
    chi: np.ndarray
    clo: np.ndarray
    cabs: np.ndarray
    dc: np.ndarray
    lam_hi: np.ndarray
    lam_lo: np.ndarray
    ilam_hi: np.ndarray
    ilam_lo: np.ndarray
    wx: np.ndarray
    wy: np.ndarray
    wvals: np.ndarray
    wh: float
    u1: np.ndarray
    u1_i0: int
    u1_j0: int
    u1_scale: float
    u2: ra.DyadicSet
    u3: ra.DyadicSet
    u3_edt: np.ndarray
    lam: float
    delta: float
    slack: float
    r_in: float
    tail_q: float
    tail_c: float
    coeff_err: float
    m_max: int


@lru_cache(maxsize=8)
def _kernel_data_cached(fmap: FeigenbaumMap, atlas: RegionAtlas, m_max: int) -> KernelData:
    chi, clo = fmap.dd_coeffs
    lam_pow_hi = np.empty(m_max + 2)
    lam_pow_lo = np.empty(m_max + 2)
    ilam_hi = np.empty(m_max + 2)
    ilam_lo = np.empty(m_max + 2)
    with mpmath.workprec(fmap.prec):
        for r in range(m_max + 2):
            v = fmap.lam ** r
            lam_pow_hi[r] = float(v)
            lam_pow_lo[r] = float(v - mpmath.mpf(lam_pow_hi[r]))
            v = 1 / v
            ilam_hi[r] = float(v)
            ilam_lo[r] = float(v - mpmath.mpf(ilam_hi[r]))
    q, c = fmap.tail_model
    g = atlas.W_boundary.grid
    return KernelData(
        chi=np.ascontiguousarray(chi), clo=np.ascontiguousarray(clo),
        cabs=np.abs(chi), dc=np.arange(len(chi)) * chi,
        lam_hi=lam_pow_hi, lam_lo=lam_pow_lo, ilam_hi=ilam_hi, ilam_lo=ilam_lo,
        wx=g.cx, wy=g.cy, wvals=g.vals, wh=g.h,
        u1=np.ascontiguousarray(atlas.U1.mask), u1_i0=atlas.U1.i0, u1_j0=atlas.U1.j0,
        u1_scale=float(2 ** atlas.U1.q),
        u2=atlas.U2, u3=atlas.U3, u3_edt=_u3_edt(atlas.U3),
        lam=float(fmap.lam), delta=atlas.delta, slack=atlas.hausdorff_slack,
        r_in=atlas.inner_radius, tail_q=q, tail_c=c,
        coeff_err=float(fmap.series.coeff_err), m_max=m_max,
    )


def kernel_data(fmap: FeigenbaumMap, atlas: RegionAtlas, m_max: int = ra.M_MAX) -> KernelData:
    return _kernel_data_cached(fmap, atlas, m_max)


# -- double-double arithmetic ------------------------------------------------

@njit(cache=True, inline="always")
def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


@njit(cache=True, inline="always")
def _quick_two_sum(a, b):
    s = a + b
    return s, b - (s - a)


@njit(cache=True, inline="always")
def _split(a):
    t = 134217729.0 * a
    hi = t - (t - a)
    return hi, a - hi


@njit(cache=True, inline="always")
def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


@njit(cache=True, inline="always")
def _dd_add(ah, al, bh, bl):
    s, e = _two_sum(ah, bh)
    e += al + bl
    return _quick_two_sum(s, e)


@njit(cache=True, inline="always")
def _dd_mul(ah, al, bh, bl):
    p, e = _two_prod(ah, bh)
    e += ah * bl + al * bh
    return _quick_two_sum(p, e)


@njit(cache=True, inline="always")
def _cdd_mul(xrh, xrl, xih, xil, yrh, yrl, yih, yil):
    a_h, a_l = _dd_mul(xrh, xrl, yrh, yrl)
    b_h, b_l = _dd_mul(xih, xil, yih, yil)
    c_h, c_l = _dd_mul(xrh, xrl, yih, yil)
    d_h, d_l = _dd_mul(xih, xil, yrh, yrl)
    rh, rl = _dd_add(a_h, a_l, -b_h, -b_l)
    ih, il = _dd_add(c_h, c_l, d_h, d_l)
    return rh, rl, ih, il


@njit(cache=True)
def _eval_dd(chi, clo, kmax, wrh, wrl, wih, wil):
    """F(w) in double-double by Horner in t = w^2 over coefficients 0..kmax."""
    trh, trl, tih, til = _cdd_mul(wrh, wrl, wih, wil, wrh, wrl, wih, wil)
    frh, frl, fih, fil = chi[kmax], clo[kmax], 0.0, 0.0
    for k in range(kmax - 1, -1, -1):
        frh, frl, fih, fil = _cdd_mul(frh, frl, fih, fil, trh, trl, tih, til)
        frh, frl = _dd_add(frh, frl, chi[k], clo[k])
    return frh, frl, fih, fil


@njit(cache=True)
def _deriv_d(dc, w):
    t = w * w
    h = dc[dc.shape[0] - 1] + 0j
    for k in range(dc.shape[0] - 2, 0, -1):
        h = h * t + dc[k]
    return 2 * w * h


@njit(cache=True)
def _series_bounds(cabs, tail_q, tail_c, coeff_err, at):
    """(kmax, H(|t|), dropped part, truncation beyond the series, coefficient error)."""
    n = cabs.shape[0]
    terms = np.empty(n)
    pw = 1.0
    total = 0.0
    plain = 0.0
    for k in range(n):
        terms[k] = cabs[k] * pw
        total += terms[k]
        plain += pw
        pw *= at
    x = tail_q * at
    if x >= 1.0:
        trunc = np.inf
    else:
        trunc = tail_c * x ** n / (1.0 - x)
    target = 1e-38 * max(1.0, total)
    suffix = 0.0
    kmax = n - 1
    while kmax > 0 and suffix + terms[kmax] <= target:
        suffix += terms[kmax]
        kmax -= 1
    return kmax, total, suffix, trunc, coeff_err * plain


@njit(cache=True)
def _second_majorant(cabs, r):
    r2 = r * r
    s = 0.0
    for k in range(cabs.shape[0] - 1, 0, -1):
        s = s * r2 + 2 * k * (2 * k - 1) * cabs[k]
    return s * 1.001


# -- geometry in the kernel --------------------------------------------------

@njit(cache=True)
def _u1_inside(u1, i0, j0, scale, x, y, e):
    """p in U1, with points whose error disk touches U1 counted as inside."""
    if ra.dyadic_contains_one(u1, i0, j0, scale, x, y):
        return True
    if e > 0.0:
        for sx in (-1.0, 1.0):
            for sy in (-1.0, 1.0):
                if ra.dyadic_contains_one(u1, i0, j0, scale, x + sx * e, y + sy * e):
                    return True
    return False


@njit(cache=True)
def _select_m(wx, wy, wvals, wh, lam, ilam_hi, delta, slack, r_in, m_max, x, y, e):
    ap = math.sqrt(x * x + y * y)
    if ap + e == 0.0:
        return m_max
    lim = r_in - delta / (2 * lam) - slack
    m = int(math.floor(math.log((ap + e) / lim) / math.log(lam))) - 1
    if m < 0:
        m = 0
    if m > m_max:
        m = m_max
    start = m
    best = -1
    while m <= m_max:
        s = ilam_hi[m]
        es = e * s * (1 + 1e-12)
        if not geo.sd_at_least(wx, wy, wvals, wh, x * s, y * s, delta / 4 + slack + es):
            break
        best = m
        s1 = ilam_hi[m + 1]
        es1 = e * s1 * (1 + 1e-12)
        if m == m_max or not geo.sd_at_least(wx, wy, wvals, wh, x * s1, y * s1,
                                             delta / (2 * lam) - slack - es1):
            return m
        m += 1
    if best >= 0:
        # error-limited: the deepest certified level (a smaller, still valid shortcut)
        return best
    for m in range(start - 1, -1, -1):
        s = ilam_hi[m]
        if geo.sd_at_least(wx, wy, wvals, wh, x * s, y * s, delta / 4 + slack + e * s * (1 + 1e-12)):
            return m
    return -1


@njit(cache=True)
def _classify_point(zx, zy, max_steps, log2_thr, mandate,
                    chi, clo, cabs, dc, lam_hi, lam_lo, ilam_hi, ilam_lo,
                    wx, wy, wvals, wh, u1, u1_i0, u1_j0, u1_scale,
                    lam, delta, slack, r_in, tail_q, tail_c, coeff_err, m_max):
    """Returns (h, status, steps, max m~, log2 d used, log2 s~, final error)."""
    prh, prl, pih, pil = zx, 0.0, zy, 0.0
    log2d = 0.0
    log2d_in = 0.0
    e = 0.0
    s_tilde = 0.0
    max_m = 0
    i = 0
    while i <= max_steps:
        eg = e + 2.3e-16 * math.sqrt(prh * prh + pih * pih)
        if not _u1_inside(u1, u1_i0, u1_j0, u1_scale, prh, pih, eg):
            h = 0 if log2d_in >= log2_thr else 1
            return h, STATUS_EXIT, i, max_m, log2d_in, math.log2(s_tilde) if s_tilde > 0 else -1.0, e
        log2d_in = log2d
        m = _select_m(wx, wy, wvals, wh, lam, ilam_hi, delta, slack, r_in, m_max, prh, pih, eg)
        if m < 0:
            return 0, STATUS_PRECISION, i, max_m, log2d_in, -1.0, e
        if m > max_m:
            max_m = m
        r = m - 1 if m > 0 else 0
        # w = p / lam^r
        wrh, wrl = _dd_mul(prh, prl, ilam_hi[r], ilam_lo[r])
        wih, wil = _dd_mul(pih, pil, ilam_hi[r], ilam_lo[r])
        aw = math.sqrt(wrh * wrh + wih * wih)
        kmax, htot, dropped, trunc, cerr = _series_bounds(cabs, tail_q, tail_c, coeff_err, aw * aw)
        frh, frl, fih, fil = _eval_dd(chi, clo, kmax, wrh, wrl, wih, wil)
        dfw = _deriv_d(dc, complex(wrh, wih))
        adf = abs(dfw)
        af = math.sqrt(frh * frh + fih * fih)
        ew = e * ilam_hi[r] * (1 + 1e-12)
        lip = adf * (1 + 1e-12) + 1e-300
        if ew > 0.0:
            lip += _second_majorant(cabs, aw + ew) * ew
        eval_err = ((kmax + 4) * _DD_EPS * htot + dropped + trunc + cerr
                    + (adf + 1.0) * aw * 4 * _DD_EPS)
        # p' = (-lam)^r F(w)
        sgn = -1.0 if r % 2 == 1 else 1.0
        nrh, nrl = _dd_mul(frh, frl, sgn * lam_hi[r], sgn * lam_lo[r])
        nih, nil = _dd_mul(fih, fil, sgn * lam_hi[r], sgn * lam_lo[r])
        e = lam_hi[r] * (lip * ew + eval_err + af * 4 * _DD_EPS) * (1 + 1e-10)
        if not e <= mandate:
            return 0, STATUS_PRECISION, i, max_m, log2d_in, -1.0, e
        prh, prl, pih, pil = nrh, nrl, nih, nil
        log2d += math.log2(adf) if adf > 0.0 else _LOG2_NEG_INF
        s_tilde += 2.0 ** r
        i += 1
    return 0, STATUS_EXHAUSTED, i, max_m, log2d_in, math.log2(s_tilde) if s_tilde > 0 else -1.0, e


@njit(cache=True)
def _disk_misses(mask, i0, j0, scale, x, y, r):
    """True iff the closed disk D((x, y), r) meets no square of the dyadic mask."""
    if not r * scale <= 64.0 or not math.isfinite(x) or not math.isfinite(y):
        return False
    sx = x * scale
    sy = y * scale
    rs = r * scale * (1 + 1e-12) + 1e-12
    ilo = int(math.floor(sx - rs)) - 1
    ihi = int(math.floor(sx + rs)) + 1
    jlo = int(math.floor(sy - rs)) - 1
    jhi = int(math.floor(sy + rs)) + 1
    for i in range(ilo, ihi + 1):
        dx = max(0.0, max(i - sx, sx - (i + 1)))
        if dx > rs:
            continue
        for j in range(jlo, jhi + 1):
            dy = max(0.0, max(j - sy, sy - (j + 1)))
            if dx * dx + dy * dy <= rs * rs and ra._in_mask(mask, i0, j0, i, j):
                return False
    return True


@njit(cache=True)
def _clear_disk(zx, zy, rho, max_steps, chi, clo, cabs, dc, lam_hi, lam_lo, ilam_hi, ilam_lo,
                wx, wy, wvals, wh, u1, u1_i0, u1_j0, u1_scale, u3, u3_i0, u3_j0, u3_scale,
                lam, delta, slack, r_in, tail_q, tail_c, coeff_err, m_max):
    """True when the disk D(z, rho) is certified disjoint from J.

    The disk is carried through the same shortcut steps as the classifier,
    its radius growing by the certified Lipschitz bound of each step.  Since
    every step is an iterate of F and J is forward invariant, an image disk
    that misses the J cover U3 proves the original disk misses J.
    """
    prh, prl, pih, pil = zx, 0.0, zy, 0.0
    e = rho
    i = 0
    while i <= max_steps:
        eg = e + 2.3e-16 * math.sqrt(prh * prh + pih * pih)
        if _disk_misses(u3, u3_i0, u3_j0, u3_scale, prh, pih, eg):
            return True
        if not eg <= delta or not _u1_inside(u1, u1_i0, u1_j0, u1_scale, prh, pih, eg):
            return False
        m = _select_m(wx, wy, wvals, wh, lam, ilam_hi, delta, slack, r_in, m_max, prh, pih, eg)
        if m < 0:
            return False
        r = m - 1 if m > 0 else 0
        wrh, wrl = _dd_mul(prh, prl, ilam_hi[r], ilam_lo[r])
        wih, wil = _dd_mul(pih, pil, ilam_hi[r], ilam_lo[r])
        aw = math.sqrt(wrh * wrh + wih * wih)
        kmax, htot, dropped, trunc, cerr = _series_bounds(cabs, tail_q, tail_c, coeff_err, aw * aw)
        frh, frl, fih, fil = _eval_dd(chi, clo, kmax, wrh, wrl, wih, wil)
        adf = abs(_deriv_d(dc, complex(wrh, wih)))
        af = math.sqrt(frh * frh + fih * fih)
        ew = eg * ilam_hi[r] * (1 + 1e-12)
        lip = adf * (1 + 1e-12) + _second_majorant(cabs, aw + ew) * ew
        eval_err = ((kmax + 4) * _DD_EPS * htot + dropped + trunc + cerr
                    + (adf + 1.0) * aw * 4 * _DD_EPS)
        sgn = -1.0 if r % 2 == 1 else 1.0
        prh, prl = _dd_mul(frh, frl, sgn * lam_hi[r], sgn * lam_lo[r])
        pih, pil = _dd_mul(fih, fil, sgn * lam_hi[r], sgn * lam_lo[r])
        e = lam_hi[r] * (lip * ew + eval_err + af * 4 * _DD_EPS) * (1 + 1e-10)
        i += 1
    return False


@njit(cache=True, parallel=True)
def _clear_many(xs, ys, rho, max_steps, chi, clo, cabs, dc, lam_hi, lam_lo, ilam_hi, ilam_lo,
                wx, wy, wvals, wh, u1, u1_i0, u1_j0, u1_scale, u3, u3_i0, u3_j0, u3_scale,
                lam, delta, slack, r_in, tail_q, tail_c, coeff_err, m_max):
    out = np.empty(xs.shape[0], dtype=np.bool_)
    for k in prange(xs.shape[0]):
        out[k] = _clear_disk(xs[k], ys[k], rho[k], max_steps, chi, clo, cabs, dc, lam_hi, lam_lo,
                             ilam_hi, ilam_lo, wx, wy, wvals, wh, u1, u1_i0, u1_j0, u1_scale,
                             u3, u3_i0, u3_j0, u3_scale, lam, delta, slack, r_in, tail_q, tail_c,
                             coeff_err, m_max)
    return out


@njit(cache=True, parallel=True)
def _classify_many(xs, ys, max_steps, log2_thr, mandate,
                   chi, clo, cabs, dc, lam_hi, lam_lo, ilam_hi, ilam_lo,
                   wx, wy, wvals, wh, u1, u1_i0, u1_j0, u1_scale,
                   lam, delta, slack, r_in, tail_q, tail_c, coeff_err, m_max):
    n = xs.shape[0]
    h = np.empty(n, dtype=np.int8)
    status = np.empty(n, dtype=np.int8)
    steps = np.empty(n, dtype=np.int64)
    max_m = np.empty(n, dtype=np.int64)
    log2d = np.empty(n)
    log2s = np.empty(n)
    err = np.empty(n)
    for k in prange(n):
        r = _classify_point(xs[k], ys[k], max_steps, log2_thr, mandate,
                            chi, clo, cabs, dc, lam_hi, lam_lo, ilam_hi, ilam_lo,
                            wx, wy, wvals, wh, u1, u1_i0, u1_j0, u1_scale,
                            lam, delta, slack, r_in, tail_q, tail_c, coeff_err, m_max)
        h[k], status[k], steps[k], max_m[k], log2d[k], log2s[k], err[k] = r
    return h, status, steps, max_m, log2d, log2s, err


@dataclass
class BatchResult:
    h: np.ndarray
    status: np.ndarray
    steps: np.ndarray
    max_mtilde: np.ndarray
    log2d: np.ndarray
    log2_stilde: np.ndarray
    err: np.ndarray
    in_u2: np.ndarray
    far_lower: np.ndarray = field(default_factory=lambda: np.empty(0))


def _run_kernel(kd: KernelData, xs, ys, n: int, consts: ClassifierConstants):
    return _classify_many(
        np.ascontiguousarray(xs, dtype=float), np.ascontiguousarray(ys, dtype=float),
        consts.max_steps(n), consts.log2_threshold(n), consts.mandate(n, kd.lam, kd.delta),
        kd.chi, kd.clo, kd.cabs, kd.dc, kd.lam_hi, kd.lam_lo, kd.ilam_hi, kd.ilam_lo,
        kd.wx, kd.wy, kd.wvals, kd.wh, kd.u1, kd.u1_i0, kd.u1_j0, kd.u1_scale,
        kd.lam, kd.delta, kd.slack, kd.r_in, kd.tail_q, kd.tail_c, kd.coeff_err, kd.m_max)


def u3_distance_lower(kd: KernelData, z: np.ndarray, cap: float = math.inf) -> np.ndarray:
    """Lower bounds on min(d(z, U3), cap), with a relative safety margin."""
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    return _u3_distance(kd.u3.mask, kd.u3.i0, kd.u3.j0, float(2 ** kd.u3.q), kd.u3_edt, _EDT_PAD,
                        np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag), cap)


_EDT_PAD = 64


def _u3_edt(u3: ra.DyadicSet) -> np.ndarray:
    """Distance (in cells) from each cell centre to the nearest U3 cell centre."""
    from scipy import ndimage

    m = np.pad(u3.mask, _EDT_PAD)
    return ndimage.distance_transform_edt(~m)


@njit(cache=True, parallel=True)
def _u3_distance(mask, i0, j0, scale, edt, pad, xs, ys, cap):
    out = np.empty(xs.shape[0])
    capu = cap * scale
    for k in prange(xs.shape[0]):
        sx = xs[k] * scale
        sy = ys[k] * scale
        ci = int(math.floor(sx)) - i0 + pad
        cj = int(math.floor(sy)) - j0 + pad
        if ci < 0 or cj < 0 or ci >= edt.shape[0] or cj >= edt.shape[1]:
            # beyond the padded grid every U3 square is at least pad cells away
            gi = max(0, max(-ci, ci - edt.shape[0] + 1))
            gj = max(0, max(-cj, cj - edt.shape[1] + 1))
            lo = pad + math.sqrt(gi * gi + gj * gj) - 2.0
            out[k] = min(lo, capu) / scale
            continue
        lo = edt[ci, cj] - math.sqrt(2.0)
        if lo >= capu:
            out[k] = cap
            continue
        rad = int(math.ceil(edt[ci, cj] + 3.0))
        best = np.inf
        for a in range(ci - rad, ci + rad + 1):
            for b in range(cj - rad, cj + rad + 1):
                if a < pad or b < pad or a >= pad + mask.shape[0] or b >= pad + mask.shape[1]:
                    continue
                if not mask[a - pad, b - pad]:
                    continue
                i = a - pad + i0
                j = b - pad + j0
                dx = max(0.0, max(i - sx, sx - (i + 1)))
                dy = max(0.0, max(j - sy, sy - (j + 1)))
                d2 = dx * dx + dy * dy
                if d2 < best:
                    best = d2
        out[k] = min(math.sqrt(best), capu) / scale * (1 - 1e-12)
    return out


def classify_batch(zs, n: int, fmap: FeigenbaumMap, atlas: RegionAtlas, consts: ClassifierConstants,
                   escalate: bool = True) -> BatchResult:
    """h(n, z) for many points.  Points outside U2 go through far_classify."""
    zs = np.atleast_1d(np.asarray(zs, dtype=complex)).ravel()
    kd = kernel_data(fmap, atlas)
    in_u2 = kd.u2.contains(zs)
    size = zs.shape[0]
    res = BatchResult(
        h=np.ones(size, dtype=np.int8), status=np.full(size, STATUS_EXIT, dtype=np.int8),
        steps=np.zeros(size, dtype=np.int64), max_mtilde=np.zeros(size, dtype=np.int64),
        log2d=np.zeros(size), log2_stilde=np.full(size, -1.0), err=np.zeros(size), in_u2=in_u2,
        far_lower=np.full(size, np.nan))
    out = ~in_u2
    if out.any():
        lo = u3_distance_lower(kd, zs[out], 4.0 * consts.c_far * 2.0 ** -n)
        res.far_lower[out] = lo
        res.h[out] = _far_decision(lo, n, consts, kd.delta)
    idx = np.nonzero(in_u2)[0]
    if idx.size:
        r = _run_kernel(kd, zs[idx].real, zs[idx].imag, n, consts)
        for arr, vals in zip((res.h, res.status, res.steps, res.max_mtilde, res.log2d, res.log2_stilde, res.err), r):
            arr[idx] = vals
        bad = idx[res.status[idx] == STATUS_PRECISION]
        for k in bad:
            if not escalate:
                raise PrecisionExhausted(f"double-double budget exceeded at {zs[k]}")
            tr = _escalated_trace(zs[k], n, fmap, atlas, consts)
            res.h[k], res.status[k] = tr.h, tr.status
            res.steps[k], res.max_mtilde[k] = tr.steps, tr.max_mtilde
            res.log2d[k] = tr.log2d
            res.err[k] = float(tr.states[-1].err_budget) if tr.states else 0.0
    return res


def _far_decision(lower, n: int, consts: ClassifierConstants, delta: float):
    lower = np.asarray(lower)
    if 2.0 ** -n * consts.c_far < delta / 4:
        # outside U2 the distance to U3 already exceeds delta/4
        return np.ones(lower.shape, dtype=np.int8)
    return (lower > 2.0 ** -n * consts.c_far).astype(np.int8)


def far_classify(z, n: int, atlas: RegionAtlas, c_far: float = 1.0) -> int:
    """1 when d(z, U3) exceeds c_far 2^-n (exact rational distance), else 0."""
    threshold = 2.0 ** -n * c_far
    if threshold < atlas.delta / 4 and not bool(atlas.U2.contains(complex(z))[0]):
        return 1
    from fractions import Fraction

    d2 = atlas.U3.distance2_exact(complex(z))
    return 1 if d2 > Fraction(threshold) ** 2 else 0


def classify(z, n: int, fmap: FeigenbaumMap, atlas: RegionAtlas, consts: ClassifierConstants) -> int:
    z = complex(z)
    if not bool(atlas.U2.contains(z)[0]):
        return far_classify(z, n, atlas, consts.c_far)
    return int(classify_batch(np.array([z]), n, fmap, atlas, consts).h[0])


# -- the multiprecision path -------------------------------------------------

def _mp_bounds(fmap: FeigenbaumMap, aw: float, prec: int):
    cabs = np.abs(fmap.float_coeffs)
    q, c = fmap.tail_model
    at = aw * aw
    htot = float(np.sum(cabs * at ** np.arange(len(cabs))))
    x = q * at
    trunc = math.inf if x >= 1 else c * x ** len(cabs) / (1 - x)
    cerr = float(fmap.series.coeff_err) * sum(at ** k for k in range(len(cabs)))
    rounding = 2.0 ** (-prec + math.ceil(math.log2(len(cabs))) + 4) * htot
    return htot, trunc + cerr + rounding, cabs


def orbit_step(state: OrbitState, fmap: FeigenbaumMap, atlas: RegionAtlas, mandate: float | None = None,
               prec: int | None = None):
    """One shortcut step at working precision ``prec``; Terminated outside U1."""
    prec = prec or fmap.prec
    with mpmath.workprec(prec):
        p = state.p
        eg = float(state.err_budget) + 2.3e-16 * abs(complex(p))
        if not _u1_with_error(atlas, complex(p), eg):
            return TERMINATED
        m = ra.select_mtilde(atlas, complex(p), eg) if bool(atlas.U1.contains(complex(p))[0]) \
            else ra._select_mtilde(atlas, complex(p), eg, ra.M_MAX)
        r = max(0, m - 1)
        lam = fmap.lam
        scale = lam ** r
        w = p / scale
        series = fmap.series
        fw = sc.eval(series, w)
        dfw = sc.eval_deriv(series, w)
        aw = float(abs(w))
        _, eval_err, cabs = _mp_bounds(fmap, aw, prec)
        ew = float(state.err_budget) / float(scale) * (1 + 1e-12)
        lip = float(abs(dfw)) * (1 + 1e-12)
        if ew > 0:
            lip += float(_second_majorant(cabs, aw + ew)) * ew
        err = float(scale) * (lip * ew + eval_err) * (1 + 1e-10)
        if mandate is not None and not err <= mandate:
            raise PrecisionExhausted(f"error {err:.3e} above mandate {mandate:.3e} at {prec} bits")
        new_p = (-lam) ** r * fw
        return OrbitState(new_p, state.d * abs(dfw), state.s_tilde + 2 ** r, state.i + 1, m,
                          mpmath.mpf(err))


def _u1_with_error(atlas: RegionAtlas, p: complex, e: float) -> bool:
    if bool(atlas.U1.contains(p)[0]):
        return True
    corners = [p + complex(sx * e, sy * e) for sx in (-1, 1) for sy in (-1, 1)]
    return bool(np.any(atlas.U1.contains(np.array(corners))))


@dataclass
class Trace:
    states: list
    h: int
    status: int
    steps: int
    max_mtilde: int
    log2d: float


def classify_trace(z, n: int, fmap: FeigenbaumMap, atlas: RegionAtlas, consts: ClassifierConstants,
                   prec: int | None = None, check_mandate: bool = True) -> Trace:
    """Run the classifier on the multiprecision path and keep every state."""
    prec = prec or max(fmap.prec, 8 * n + 128)
    mandate = consts.mandate(n, atlas.lam, atlas.delta) if check_mandate else None
    with mpmath.workprec(prec):
        st = OrbitState(mpmath.mpc(z), mpmath.mpf(1), 0, 0, None, mpmath.mpf(0))
        states = [st]
        d_in = st.d
        limit = consts.max_steps(n)
        thr = consts.K2 * mpmath.mpf(2) ** n + 1
        max_m = 0
        while st.i <= limit:
            nxt = orbit_step(st, fmap, atlas, mandate, prec)
            if nxt is TERMINATED:
                h = 0 if d_in >= thr else 1
                return Trace(states, h, STATUS_EXIT, st.i, max_m, _log2(d_in))
            d_in = st.d
            st = nxt
            max_m = max(max_m, st.m_tilde)
            states.append(st)
        return Trace(states, 0, STATUS_EXHAUSTED, st.i, max_m, _log2(d_in))


def _log2(x) -> float:
    return float(mpmath.log(x, 2)) if x > 0 else _LOG2_NEG_INF


def _escalated_trace(z, n, fmap, atlas, consts) -> Trace:
    bits = 8 * n + 128
    for _ in range(3):
        try:
            return classify_trace(z, n, fmap, atlas, consts, prec=bits)
        except PrecisionExhausted:
            bits *= 2
    raise PrecisionExhausted(f"precision mandate unattainable at {z} (n = {n})")


# -- pixels ------------------------------------------------------------------

def subpixel_factor(consts: ClassifierConstants) -> int:
    """Subpixels per pixel side in the uniform scheme (a power of two)."""
    need = 4.0 / (consts.K * math.sqrt(2.0))
    return 1 << max(0, math.ceil(math.log2(need)))


def classify_pixel(center, n: int, fmap: FeigenbaumMap, atlas: RegionAtlas, consts: ClassifierConstants,
                   mode: str = "adaptive") -> bool:
    """True = fill.  The result is a valid output for the pixel centre at precision n."""
    return bool(classify_pixels(np.array([complex(center)]), n, fmap, atlas, consts, mode)[0])


def classify_pixels(centers, n: int, fmap: FeigenbaumMap, atlas: RegionAtlas, consts: ClassifierConstants,
                    mode: str = "adaptive", stats: dict | None = None) -> np.ndarray:
    centers = np.atleast_1d(np.asarray(centers, dtype=complex)).ravel()
    if mode == "adaptive":
        return _adaptive_pixels(centers, n, fmap, atlas, consts, stats)
    if mode == "uniform":
        return np.array([_uniform_pixel(c, n, fmap, atlas, consts) for c in centers], dtype=bool)
    raise ValueError(f"unknown pixel mode {mode!r}")


def _uniform_pixel(c: complex, n, fmap, atlas, consts) -> bool:
    f = subpixel_factor(consts)
    r1 = 2.0 ** (-n - 2)
    s = 2 * r1 / f
    off = (np.arange(f) + 0.5) * s - r1
    pts = (c.real + off[None, :] + 1j * (c.imag + off[:, None])).ravel()
    res = classify_batch(pts, n + 3, fmap, atlas, consts)
    return bool(np.any(res.h == 0))


def clear_disks(zs, radii, n: int, fmap: FeigenbaumMap, atlas: RegionAtlas, consts: ClassifierConstants) -> np.ndarray:
    """Certify disks D(z, r) disjoint from J (False means "not certified")."""
    zs = np.atleast_1d(np.asarray(zs, dtype=complex)).ravel()
    radii = np.broadcast_to(np.asarray(radii, dtype=float), zs.shape)
    kd = kernel_data(fmap, atlas)
    out = np.zeros(zs.shape, dtype=bool)
    far = ~kd.u2.contains(zs)
    if far.any():
        out[far] = u3_distance_lower(kd, zs[far], 2 * float(radii[far].max())) > radii[far]
    idx = np.nonzero(~far)[0]
    if idx.size:
        out[idx] = _clear_many(
            np.ascontiguousarray(zs[idx].real), np.ascontiguousarray(zs[idx].imag),
            np.ascontiguousarray(radii[idx]), consts.max_steps(n),
            kd.chi, kd.clo, kd.cabs, kd.dc, kd.lam_hi, kd.lam_lo, kd.ilam_hi, kd.ilam_lo,
            kd.wx, kd.wy, kd.wvals, kd.wh, kd.u1, kd.u1_i0, kd.u1_j0, kd.u1_scale,
            np.ascontiguousarray(kd.u3.mask), kd.u3.i0, kd.u3.j0, float(2 ** kd.u3.q),
            kd.lam, kd.delta, kd.slack, kd.r_in, kd.tail_q, kd.tail_c, kd.coeff_err, kd.m_max)
    return out


def _adaptive_pixels(centers, n, fmap, atlas, consts, stats):
    """Decide fill/blank per pixel by refining squares over the disk of radius 2^-n-2.

    The pixel is filled as soon as some square centre q has a distance upper
    bound reaching within 2^-n-1 of the pixel centre; the bound comes from
    h(n+3, q): an exit gives d(q, J) <= K2/d, exhaustion d(q, J) <= 2^-n-3.
    A square is dropped once its circumscribed disk is certified free of J,
    and the pixel is blank when no square is left.
    """
    r1 = 2.0 ** (-n - 2)
    r2 = 2.0 ** (-n - 1)
    level = n + 3
    npix = centers.shape[0]
    fill = np.zeros(npix, dtype=bool)
    h0 = r1
    offs = np.array([-0.5, 0.5]) * h0
    pix = np.repeat(np.arange(npix), 4)
    qx = (centers.real[:, None] + np.array([offs[0], offs[1], offs[0], offs[1]])[None, :]).ravel()
    qy = (centers.imag[:, None] + np.array([offs[0], offs[0], offs[1], offs[1]])[None, :]).ravel()
    side = np.full(qx.shape, h0)
    rounds = evaluated = 0
    min_side = r1 * 2.0 ** -24
    while pix.size:
        rounds += 1
        keep = ~fill[pix]
        pix, qx, qy, side = pix[keep], qx[keep], qy[keep], side[keep]
        if not pix.size:
            break
        q = qx + 1j * qy
        res = classify_batch(q, level, fmap, atlas, consts)
        evaluated += q.size
        hi = np.full(q.size, np.inf)
        ex = res.in_u2 & (res.status == STATUS_EXIT)
        hi[ex] = consts.K2 * np.exp2(-res.log2d[ex])
        hi[res.in_u2 & (res.status == STATUS_EXHAUSTED)] = 2.0 ** -level
        hit = np.abs(q - centers[pix]) + hi < r2
        fill[pix[hit]] = True
        alive = ~hit & ~fill[pix]
        alive[alive] = ~clear_disks(q[alive], side[alive] * SQRT_HALF * (1 + 1e-12), level,
                                    fmap, atlas, consts)
        if np.any(alive & (side <= min_side)):
            raise RuntimeError("pixel refinement did not terminate")
        pix, qx, qy, side = pix[alive], qx[alive], qy[alive], side[alive] / 2
        cx = np.concatenate([qx - side / 2, qx + side / 2, qx - side / 2, qx + side / 2])
        cy = np.concatenate([qy - side / 2, qy - side / 2, qy + side / 2, qy + side / 2])
        pix = np.tile(pix, 4)
        side = np.tile(side, 4)
        # keep children that meet the closed disk of radius r1
        c = centers[pix]
        gx = np.maximum(0, np.abs(cx - c.real) - side / 2)
        gy = np.maximum(0, np.abs(cy - c.imag) - side / 2)
        meet = gx * gx + gy * gy <= r1 * r1
        pix, qx, qy, side = pix[meet], cx[meet], cy[meet], side[meet]
    if stats is not None:
        stats["rounds"] = stats.get("rounds", 0) + rounds
        stats["evaluated"] = stats.get("evaluated", 0) + evaluated
    return fill


# -- budgets and calibration ------------------------------------------------

@dataclass
class BudgetReport:
    n: int
    max_mtilde: int
    steps: int
    level_budget: float
    step_budget: int
    mtilde_ok: bool
    steps_ok: bool
    monotone_ok: bool


def budget_check(trace, n: int, consts: ClassifierConstants) -> BudgetReport:
    """Compare a trace (list of OrbitState or Trace) against the A, B budgets."""
    states = trace.states if isinstance(trace, Trace) else list(trace)
    ms = [s.m_tilde for s in states if s.m_tilde is not None]
    max_m = max(ms) if ms else 0
    steps = states[-1].i if states else 0
    mono = all(b >= a - 1 for a, b in zip(ms, ms[1:]))
    return BudgetReport(n, max_m, steps, consts.level_budget(n), consts.max_steps(n),
                        max_m <= consts.level_budget(n), steps <= consts.max_steps(n), mono)


def koebe_ratios(zs, dists, n: int, fmap, atlas, consts) -> np.ndarray:
    """d(z, J) |DF^s(z)| at the classifier's exit, for points with known distance."""
    res = classify_batch(zs, n, fmap, atlas, consts)
    ok = res.in_u2 & (res.status == STATUS_EXIT)
    return np.asarray(dists)[ok] * np.exp2(res.log2d[ok])


def fit_constants(ratios, budgets, widen: bool = True, c_far: float = 1.0) -> ClassifierConstants:
    """K1, K2 from Koebe ratios and A, B from (n, max level) pairs, widened for safety."""
    ratios = np.asarray(ratios, dtype=float)
    k1, k2 = float(ratios.min()), float(ratios.max())
    ns = np.array([b[0] for b in budgets], dtype=float)
    ms = np.array([b[1] for b in budgets], dtype=float)
    a, b = np.polyfit(ns, ms, 1)
    b = max(b, float(np.max(ms - a * ns)))
    if widen:
        k1, k2, a, b = k1 / 2, k2 * 2, 1.5 * a, b + 8
    return ClassifierConstants(A=float(a), B=float(b), K1=k1, K2=k2, c_far=c_far)


__all__ = [
    "BatchResult", "BudgetReport", "ClassifierConstants", "KernelData", "OrbitState", "PrecisionExhausted",
    "STATUS_EXHAUSTED", "STATUS_EXIT", "STATUS_PRECISION", "TERMINATED", "Terminated", "Trace",
    "budget_check", "classify", "clear_disks", "classify_batch", "classify_pixel", "classify_pixels", "classify_trace",
    "far_classify", "fit_constants", "kernel_data", "koebe_ratios", "orbit_step", "subpixel_factor",
    "u3_distance_lower",
]
