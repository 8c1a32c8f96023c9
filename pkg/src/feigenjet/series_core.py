"""Truncated even power series in arbitrary precision.

A series is stored in the variable ``t = z**2``: ``coeffs[k]`` multiplies
``z**(2k)``.  Coefficients are mpmath floats at the series' working
precision.  Error bookkeeping (``coeff_err`` and the norms) is rounded
upward through the low-level ``libmp`` routines, everything else rounds to
nearest.

Composition and products run in fixed-point integer arithmetic, which is an
order of magnitude faster than elementwise mpf arithmetic and has a simple
absolute error model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import mpmath
import numpy as np
from mpmath import libmp, mpc, mpf

BigFloat = mpf
ComplexBF = mpc

MIN_PRECISION = 64
_GUARD_BITS = 32


class DomainExceeded(ValueError):
    """Raised when a point or an image disk leaves a series' validity disk."""


def bigfloat(x, prec: int) -> mpf:
    """Convert ``x`` to an mpf rounded to ``prec`` bits."""
    with mpmath.workprec(prec):
        return mpf(x)


def complex_bf(re, im=0, prec: int = 128) -> mpc:
    with mpmath.workprec(prec):
        return mpc(re, im)


# -- upward rounded helpers (error bounds must be one-sided) -----------------

def _up(x) -> tuple:
    return mpf(x)._mpf_


def _add_up(a: tuple, b: tuple, prec: int) -> tuple:
    return libmp.mpf_add(a, b, prec, libmp.round_up)


def _mul_up(a: tuple, b: tuple, prec: int) -> tuple:
    return libmp.mpf_mul(a, b, prec, libmp.round_up)


def _abs(a: tuple) -> tuple:
    return libmp.mpf_abs(a)


def upward_sum(terms: Iterable, prec: int) -> mpf:
    acc = libmp.fzero
    for t in terms:
        acc = _add_up(acc, _abs(_up(t)), prec)
    return mpf(acc)


def _abs_horner_up(abs_coeffs: Sequence[tuple], r2: tuple, prec: int) -> tuple:
    acc = libmp.fzero
    for c in reversed(abs_coeffs):
        acc = _add_up(_mul_up(acc, r2, prec), c, prec)
    return acc


# -- the series type ---------------------------------------------------------

@dataclass(frozen=True)
class EvenSeries:
    """``sum(coeffs[k] * z**(2k))`` valid on the disk ``|z| <= rho``."""

    coeffs: tuple
    rho: mpf
    coeff_err: mpf
    prec: int

    def __post_init__(self):
        if self.prec < MIN_PRECISION:
            raise ValueError(f"precision below {MIN_PRECISION} bits")
        if len(self.coeffs) == 0:
            raise ValueError("empty series")
        with mpmath.workprec(self.prec):
            object.__setattr__(self, "coeffs", tuple(mpf(c) for c in self.coeffs))
            object.__setattr__(self, "rho", mpf(self.rho))
            object.__setattr__(self, "coeff_err", mpf(self.coeff_err))
        if self.coeff_err < 0:
            raise ValueError("coeff_err must be non-negative")
        if not self.rho > 0:
            raise ValueError("rho must be positive")

    @classmethod
    def from_values(cls, values: Sequence, rho=1, coeff_err=0, prec: int = 128) -> "EvenSeries":
        return cls(tuple(values), rho, coeff_err, prec)

    @property
    def degree(self) -> int:
        """Degree bound N in the t variable."""
        return len(self.coeffs) - 1

    def with_prec(self, prec: int) -> "EvenSeries":
        return EvenSeries(self.coeffs, self.rho, self.coeff_err, prec)

    def __call__(self, z):
        return eval(self, z)


# -- pointwise evaluation ----------------------------------------------------

def _check_domain(f: EvenSeries, z) -> None:
    if abs(z) > f.rho:
        raise DomainExceeded(f"|z| = {mpmath.nstr(abs(z), 8)} exceeds rho = {mpmath.nstr(f.rho, 8)}")


def eval(f: EvenSeries, z) -> mpc:  # noqa: A001 - public name of the operation
    """Horner evaluation in ``z**2``."""
    with mpmath.workprec(f.prec):
        z = mpmath.mpmathify(z)
        _check_domain(f, z)
        t = z * z
        acc = mpc(0)
        for c in reversed(f.coeffs):
            acc = acc * t + c
        return acc


def eval_deriv(f: EvenSeries, z) -> mpc:
    """Derivative ``sum(2k c_k z**(2k-1))`` as ``2 z H'(z**2)``."""
    with mpmath.workprec(f.prec):
        z = mpmath.mpmathify(z)
        _check_domain(f, z)
        t = z * z
        acc = mpc(0)
        for k in range(f.degree, 0, -1):
            acc = acc * t + k * f.coeffs[k]
        return 2 * z * acc


def eval_error_bound(f: EvenSeries, r) -> mpf:
    """Bound on |computed - represented value| for |z| <= r, plus coeff_err."""
    prec = f.prec
    r2 = _mul_up(_up(r), _up(r), prec)
    abs_c = [_abs(c._mpf_) for c in f.coeffs]
    norm = _abs_horner_up(abs_c, r2, prec)
    ones = _abs_horner_up([libmp.fone] * len(abs_c), r2, prec)
    rel = libmp.mpf_shift(libmp.fone, -prec + math.ceil(math.log2(f.degree + 1)) + 2)
    return mpf(_add_up(_mul_up(rel, norm, prec), _mul_up(f.coeff_err._mpf_, ones, prec), prec))


# -- norms -------------------------------------------------------------------

def l1_norm(f: EvenSeries, rho) -> mpf:
    """Weighted norm ``sum |c_k| rho**(2k)``, rounded upward."""
    with mpmath.workprec(f.prec):
        rho = mpf(rho)
    if not rho > 0:
        raise ValueError("rho must be positive")
    r2 = _mul_up(rho._mpf_, rho._mpf_, f.prec)
    return mpf(_abs_horner_up([_abs(c._mpf_) for c in f.coeffs], r2, f.prec))


def _norm_to_coeff_err(norm_err: mpf, rho: mpf, degree: int, prec: int) -> mpf:
    """A norm error at radius rho bounds every coefficient error by norm/rho**(2k)."""
    if rho >= 1:
        return norm_err
    scale = libmp.mpf_pow_int(rho._mpf_, -2 * degree, prec, libmp.round_up)
    return mpf(_mul_up(norm_err._mpf_, scale, prec))


# -- fixed point integer kernels ---------------------------------------------

def _to_fixed(coeffs: Sequence[mpf], bits: int) -> list:
    return [int(libmp.to_int(libmp.mpf_shift(c._mpf_, bits), libmp.round_nearest)) for c in coeffs]


def _from_fixed(ints: Sequence[int], bits: int, prec: int) -> tuple:
    return tuple(mpf(libmp.from_man_exp(libmp.MPZ(v), -bits, prec, libmp.round_nearest)) for v in ints)


def _fixed_mul(a: list, b: list, bits: int, keep: int) -> list:
    prod = np.convolve(np.array(a, dtype=object), np.array(b, dtype=object))[:keep]
    half = 1 << (bits - 1)
    return [(int(v) + half) >> bits for v in prod]


def mul(f: EvenSeries, g: EvenSeries, out_degree: int | None = None) -> EvenSeries:
    """Product truncated to ``out_degree`` (default: larger input degree)."""
    prec = max(f.prec, g.prec)
    if out_degree is None:
        out_degree = max(f.degree, g.degree)
    bits = prec + _GUARD_BITS
    prod = _fixed_mul(_to_fixed(f.coeffs, bits), _to_fixed(g.coeffs, bits), bits, out_degree + 1)
    prod += [0] * (out_degree + 1 - len(prod))
    rho = min(f.rho, g.rho)
    with mpmath.workprec(prec):
        err = f.coeff_err * l1_norm(g, 1) + g.coeff_err * l1_norm(f, 1) + mpf(2) ** (-prec)
    return EvenSeries(_from_fixed(prod, bits, prec), rho, err, prec)


# -- structural operations ---------------------------------------------------

def compose(f: EvenSeries, g: EvenSeries, out_degree: int, rho=None) -> EvenSeries:
    """Truncated ``f(g(z))`` on the disk of radius ``rho`` (default ``g.rho``).

    Both series are even, so ``f(g(z)) = sum f_k (g(z)**2)**k`` and the result
    is again even.  Truncating the intermediate products is exact because no
    product lowers degrees.  The dropped tail is bounded by a Cauchy estimate
    on a slightly larger disk whose image still fits in ``f``'s disk.
    """
    prec = max(f.prec, g.prec)
    if rho is None:
        rho = g.rho
    with mpmath.workprec(prec):
        rho = mpf(rho)
        reach = l1_norm(g, rho)
        if reach > f.rho:
            raise DomainExceeded(
                f"inner image radius {mpmath.nstr(reach, 8)} exceeds outer rho {mpmath.nstr(f.rho, 8)}")

        bits = prec + _GUARD_BITS
        keep = out_degree + 1
        gi = _to_fixed(g.coeffs, bits)
        g2 = _fixed_mul(gi, gi, bits, keep)
        acc = [_to_fixed([f.coeffs[-1]], bits)[0]]
        fi = _to_fixed(f.coeffs, bits)
        for k in range(f.degree - 1, -1, -1):
            acc = _fixed_mul(acc, g2, bits, keep)
            acc[0] += fi[k]
        acc += [0] * (keep - len(acc))
        coeffs = _from_fixed(acc, bits, prec)

        # truncation tail of the composition
        tail = None
        for grow in (mpf(3) / 2, mpf(5) / 4, mpf(11) / 10):
            outer = rho * grow
            outer_reach = l1_norm(g, outer)
            if outer_reach <= f.rho:
                big_m = l1_norm(f, max(outer_reach, mpf(2) ** -prec))
                q = (rho / outer) ** 2
                tail = big_m * q ** (out_degree + 1) / (1 - q)
                break
        if tail is None:
            tail = l1_norm(f, max(reach, mpf(2) ** -prec))

        # propagated input errors and rounding
        ones_f = sum(reach ** (2 * k) for k in range(f.degree + 1))
        ones_g = sum(rho ** (2 * k) for k in range(keep))
        lip = deriv_majorant(f, reach)
        rounding = mpf(2) ** (-bits) * keep * ones_g * ones_f
        norm_err = f.coeff_err * ones_f + lip * g.coeff_err * ones_g + tail + rounding
        err = _norm_to_coeff_err(norm_err, rho, out_degree, prec)
    return EvenSeries(coeffs, rho, err, prec)


def deriv_majorant(f: EvenSeries, r) -> mpf:
    """Upper bound for ``|f'|`` on the disk of radius ``r``: sum 2k |c_k| r**(2k-1)."""
    with mpmath.workprec(f.prec):
        r = mpf(r)
        return upward_sum((2 * k * abs(f.coeffs[k]) * r ** (2 * k - 1) for k in range(1, f.degree + 1)), f.prec)


def scale_arg(f: EvenSeries, s) -> EvenSeries:
    """``z -> f(s z)``: coefficients ``c_k s**(2k)`` and radius ``rho/|s|``."""
    with mpmath.workprec(f.prec):
        s = mpf(s)
        if s == 0:
            raise ValueError("scale must be nonzero")
        s2 = s * s
        coeffs = []
        p = mpf(1)
        for c in f.coeffs:
            coeffs.append(c * p)
            p *= s2
        grow = max(mpf(1), abs(s2) ** f.degree)
        err = mpf(_mul_up(f.coeff_err._mpf_, grow._mpf_, f.prec))
        return EvenSeries(tuple(coeffs), f.rho / abs(s), err, f.prec)


def scale_value(f: EvenSeries, a) -> EvenSeries:
    """``z -> a f(z)``."""
    with mpmath.workprec(f.prec):
        a = mpf(a)
        return EvenSeries(tuple(a * c for c in f.coeffs), f.rho, f.coeff_err * abs(a), f.prec)


def add(f: EvenSeries, g: EvenSeries) -> EvenSeries:
    prec = max(f.prec, g.prec)
    n = max(f.degree, g.degree) + 1
    with mpmath.workprec(prec):
        a = list(f.coeffs) + [mpf(0)] * (n - len(f.coeffs))
        b = list(g.coeffs) + [mpf(0)] * (n - len(g.coeffs))
        return EvenSeries(tuple(x + y for x, y in zip(a, b)), min(f.rho, g.rho),
                          f.coeff_err + g.coeff_err, prec)


def sub(f: EvenSeries, g: EvenSeries) -> EvenSeries:
    return add(f, scale_value(g, -1))


def round_coeffs(f: EvenSeries, l: int) -> EvenSeries:
    """Round every coefficient to ``l`` decimal digits after the point."""
    if l < 1:
        raise ValueError("l must be at least 1")
    if l * math.log2(10) >= f.prec:
        return f
    with mpmath.workprec(f.prec + int(4 * l) + 16):
        scale = mpf(10) ** l
        rounded = [mpmath.nint(c * scale) / scale for c in f.coeffs]
    with mpmath.workprec(f.prec):
        half_ulp = mpf(libmp.mpf_div(libmp.fone, libmp.mpf_pow_int(libmp.from_int(10), l, f.prec, libmp.round_down),
                                     f.prec, libmp.round_up)) / 2
        err = mpf(_add_up(f.coeff_err._mpf_, half_ulp._mpf_, f.prec))
        return EvenSeries(tuple(mpf(c) for c in rounded), f.rho, err, f.prec)


def truncate(f: EvenSeries, n: int, rho=None) -> EvenSeries:
    """Drop every term of z-degree above ``n``; the dropped part goes into coeff_err.

    The tail is measured in the weighted norm at ``rho`` (default the series'
    own radius) and converted to a uniform coefficient bound.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    keep = n // 2 + 1
    if keep >= len(f.coeffs):
        return f
    rho = f.rho if rho is None else mpf(rho)
    dropped = EvenSeries(tuple([mpf(0)] * keep) + f.coeffs[keep:], f.rho, 0, f.prec)
    with mpmath.workprec(f.prec):
        tail = l1_norm(dropped, rho)
        err = f.coeff_err + _norm_to_coeff_err(tail, rho, keep - 1, f.prec)
    return EvenSeries(f.coeffs[:keep], f.rho, err, f.prec)


def tail_bound(f: EvenSeries, rho, rho_outer, sup_outer) -> mpf:
    """Cauchy bound on the unknown terms beyond the stored degree.

    If the represented analytic function is bounded by ``sup_outer`` on the
    disk of radius ``rho_outer``, the terms of z-degree above ``2N`` contribute
    at most ``M q**(N+1) / (1 - q)`` with ``q = (rho/rho_outer)**2``.
    """
    with mpmath.workprec(f.prec):
        q = (mpf(rho) / mpf(rho_outer)) ** 2
        if q >= 1:
            raise ValueError("rho_outer must exceed rho")
        return mpf(sup_outer) * q ** (f.degree + 1) / (1 - q)


def to_float_array(f: EvenSeries) -> np.ndarray:
    return np.array([float(c) for c in f.coeffs])


def to_double_double(f: EvenSeries) -> tuple[np.ndarray, np.ndarray]:
    """Split each coefficient into an unevaluated sum hi + lo of two doubles."""
    with mpmath.workprec(f.prec):
        hi = np.array([float(c) for c in f.coeffs])
        lo = np.array([float(c - mpf(h)) for c, h in zip(f.coeffs, hi)])
    return hi, lo


__all__ = [
    "BigFloat", "ComplexBF", "DomainExceeded", "EvenSeries", "MIN_PRECISION",
    "add", "bigfloat", "complex_bf", "compose", "deriv_majorant", "eval", "eval_deriv", "eval_error_bound",
    "l1_norm", "mul", "round_coeffs", "scale_arg", "scale_value", "sub", "tail_bound",
    "to_double_double", "to_float_array", "truncate", "upward_sum",
]
