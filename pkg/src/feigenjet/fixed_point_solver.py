"""Newton solver for the Cvitanovic-Feigenbaum fixed point and its constants.

The unknown is the coefficient vector ``c_1..c_N`` of an even series with
``c_0 = 1``; the scaling constant is read off as ``lambda = -g(1)``.  One
Newton step linearises the defect ``g -> R(g) - g`` where

    R(g)(z) = g(g(g(1) z)) / g(1)

is the period-doubling renormalization.  Each accepted iterate is rounded to
``l`` decimal digits and truncated to degree ``N``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import mpmath
import numpy as np
from mpmath import mpc, mpf

from . import series_core as sc
from .series_core import DomainExceeded, EvenSeries


class ContainmentFailure(RuntimeError):
    pass


class DegenerateMap(RuntimeError):
    pass


class NoConvergence(RuntimeError):
    pass


class RootNotBracketed(RuntimeError):
    pass


class IdentityCheckFailed(RuntimeError):
    pass


class CacheError(RuntimeError):
    pass


DEFAULT_INITIAL = ("1", "-1.52763", "0.10482")
IDENTITY_TOL = 1e-9


@dataclass(frozen=True)
class SolverConfig:
    degree: int = 80
    precision_bits: int = 320
    rho: float = 1.0
    domain_radius: float = 2.2
    newton_tol: float | None = None
    max_iters: int = 30
    jacobian_refresh_interval: int = 1
    decimal_round: int | None = None

    def __post_init__(self):
        if self.degree < 10:
            raise ValueError("degree N must be at least 10")
        if self.precision_bits < sc.MIN_PRECISION:
            raise ValueError("precision too low")
        if not 0 < self.rho < self.domain_radius:
            raise ValueError("need 0 < rho < domain_radius")

    @property
    def tol(self) -> mpf:
        if self.newton_tol is not None:
            return mpf(self.newton_tol)
        # rounding to l digits is amplified by up to ~2^(bits/4) in the defect
        # at N = 80, so the default target leaves that much headroom
        return mpf(2) ** (-(3 * self.precision_bits // 4))

    @property
    def digits(self) -> int:
        if self.decimal_round is not None:
            return self.decimal_round
        return int((self.precision_bits - 8) * math.log10(2))


def default_initial(prec: int = 128, rho=2.2) -> EvenSeries:
    return EvenSeries.from_values([mpf(c) for c in DEFAULT_INITIAL], rho=rho, prec=prec)


# -- renormalization ---------------------------------------------------------

def renorm_apply(g: EvenSeries, rho=1, out_degree: int | None = None) -> EvenSeries:
    """``z -> g(g(g(1) z)) / g(1)``; the result inherits g's validity radius."""
    if out_degree is None:
        out_degree = g.degree
    with mpmath.workprec(g.prec):
        if g.coeffs[0] != 1:
            raise ValueError("renorm_apply needs g(0) = 1")
        s = sc.eval(g, 1).real
        if abs(s) < mpf("1e-6"):
            raise DegenerateMap("|g(1)| below 1e-6")
        inner = sc.scale_arg(g, s)
        # the real orbit lambda*rho -> g(lambda*rho) must stay in the outer disk
        if abs(sc.eval(g, s * mpf(rho)).real) > g.rho:
            raise ContainmentFailure("real orbit of the disk leaves the outer disk")
        try:
            h = sc.compose(g, inner, out_degree, rho=rho)
        except DomainExceeded as exc:
            raise ContainmentFailure(str(exc)) from exc
        h = sc.scale_value(h, 1 / s)
    return replace(h, rho=g.rho)


def _pad(g: EvenSeries, n: int) -> EvenSeries:
    cs = list(g.coeffs[: n + 1]) + [mpf(0)] * (n + 1 - len(g.coeffs))
    return EvenSeries(tuple(cs), g.rho, g.coeff_err, g.prec)


def _defect(g: EvenSeries, cfg: SolverConfig) -> list:
    r = renorm_apply(g, cfg.rho, g.degree)
    return [a - b for a, b in zip(r.coeffs[1:], g.coeffs[1:])]


def _weighted(vec, rho) -> mpf:
    r2 = mpf(rho) ** 2
    return sc.upward_sum((abs(v) * r2 ** (k + 1) for k, v in enumerate(vec)), mpmath.mp.prec)


def _jacobian(g: EvenSeries, base: list, cfg: SolverConfig) -> mpmath.matrix:
    n = g.degree
    h = mpf(2) ** (-(cfg.precision_bits // 2))
    jac = mpmath.matrix(n, n)
    for j in range(1, n + 1):
        cs = list(g.coeffs)
        cs[j] += h
        col = _defect(EvenSeries(tuple(cs), g.rho, 0, g.prec), cfg)
        for i in range(n):
            jac[i, j - 1] = (col[i] - base[i]) / h
    return jac


@dataclass
class SolveLog:
    defect_norms: list = field(default_factory=list)
    step_scales: list = field(default_factory=list)
    seconds: float = 0.0


def newton_solve(cfg: SolverConfig, initial: EvenSeries | None = None,
                 log: SolveLog | None = None) -> EvenSeries:
    """Run the damped Newton iteration and return the converged series."""
    prec = cfg.precision_bits
    log = log if log is not None else SolveLog()
    t0 = time.perf_counter()
    with mpmath.workprec(prec):
        if initial is None:
            initial = default_initial(prec, cfg.domain_radius)
        g = _pad(EvenSeries(initial.coeffs, cfg.domain_radius, 0, prec), cfg.degree)
        if g.coeffs[0] != 1:
            raise ValueError("initial series must satisfy g(0) = 1")
        tol = cfg.tol
        base = _defect(g, cfg)
        norm = _weighted(base, cfg.rho)
        log.defect_norms.append(norm)
        jac = None
        last_step = mpf(0)
        for it in range(cfg.max_iters):
            if norm <= tol:
                break
            refresh = cfg.jacobian_refresh_interval
            if jac is None or (refresh > 0 and it % refresh == 0):
                jac = _jacobian(g, base, cfg)
            step = mpmath.lu_solve(jac, mpmath.matrix([-v for v in base]))
            scale = mpf(1)
            for _ in range(12):
                cs = [g.coeffs[0]] + [c + scale * step[k] for k, c in enumerate(g.coeffs[1:])]
                trial = EvenSeries(tuple(cs), g.rho, 0, prec)
                trial = sc.truncate(sc.round_coeffs(trial, cfg.digits), 2 * cfg.degree)
                trial_base = _defect(trial, cfg)
                trial_norm = _weighted(trial_base, cfg.rho)
                if trial_norm < norm:
                    break
                scale /= 2
            else:
                raise NoConvergence(f"damping failed at iteration {it}")
            last_step = max(abs(scale * s) for s in step)
            g, base, norm = trial, trial_base, trial_norm
            log.defect_norms.append(norm)
            log.step_scales.append(scale)
        else:
            if norm > tol:
                raise NoConvergence(f"defect {mpmath.nstr(norm, 5)} after {cfg.max_iters} iterations")
        err = max(norm, last_step, g.coeff_err)
        g = EvenSeries(g.coeffs, cfg.domain_radius, err, prec)
    log.seconds = time.perf_counter() - t0
    return g


# -- the solved map ----------------------------------------------------------

@dataclass(frozen=True)
class FeigenbaumMap:
    """Solved fixed point: series for F on its disk plus the derived constants."""

    series: EvenSeries
    lam: mpf
    x0: mpf
    a: mpf
    residual: mpf

    def __post_init__(self):
        if self.series.coeffs[0] != 1:
            raise ValueError("normalization F(0) = 1 violated")
        if not 0 < self.lam < 1:
            raise ValueError("lambda outside (0, 1)")

    @property
    def prec(self) -> int:
        return self.series.prec

    @property
    def degree(self) -> int:
        return self.series.degree

    @cached_property
    def tail_model(self) -> tuple[float, float]:
        """Geometric fit ``|c_k| <= C q**k`` over the upper half of the coefficients."""
        ks = np.arange(self.degree // 2, self.degree + 1)
        logs = np.array([float(mpmath.log(abs(self.series.coeffs[k]) + mpf(10) ** -300)) for k in ks])
        slope, _ = np.polyfit(ks, logs, 1)
        q = math.exp(slope)
        log_c = max(logs - slope * ks)
        return q, math.exp(log_c)

    def truncation_error(self, r: float) -> float:
        """Estimated contribution of the unrepresented terms on |z| <= r."""
        q, c = self.tail_model
        x = q * r * r
        if x >= 1:
            return math.inf
        n = self.degree + 1
        return c * x ** n / (1 - x)

    def value(self, z, depth: int = 0) -> mpc:
        """F at any point reachable through the functional equation."""
        with mpmath.workprec(self.prec):
            z = mpmath.mpmathify(z)
            if abs(z) <= self.series.rho:
                return sc.eval(self.series, z)
            if depth > 40:
                raise DomainExceeded("functional equation recursion too deep")
            inner = self.value(self.lam * z, depth + 1)
            return -self.value(inner, depth + 1) / self.lam

    def deriv(self, z, depth: int = 0) -> mpc:
        with mpmath.workprec(self.prec):
            z = mpmath.mpmathify(z)
            if abs(z) <= self.series.rho:
                return sc.eval_deriv(self.series, z)
            if depth > 40:
                raise DomainExceeded("functional equation recursion too deep")
            w = self.lam * z
            return -self.deriv(self.value(w), depth + 1) * self.deriv(w, depth + 1)

    @cached_property
    def float_coeffs(self) -> np.ndarray:
        return sc.to_float_array(self.series)

    @cached_property
    def dd_coeffs(self) -> tuple[np.ndarray, np.ndarray]:
        return sc.to_double_double(self.series)

    def fast(self) -> "FastMap":
        return FastMap(self.float_coeffs, float(self.lam), float(self.series.rho))


class FastMap:
    """Vectorized binary64 evaluation of F and F' with the functional-equation extension."""

    def __init__(self, coeffs: np.ndarray, lam: float, radius: float, max_depth: int = 24):
        self.c = np.asarray(coeffs, dtype=float)
        self.dc = np.arange(len(self.c)) * self.c
        self.lam = lam
        self.radius = radius
        self.max_depth = max_depth

    def _direct(self, z):
        t = z * z
        f = np.zeros_like(t) + self.c[-1]
        h = np.zeros_like(t) + self.dc[-1]
        for k in range(len(self.c) - 2, -1, -1):
            f = f * t + self.c[k]
        for k in range(len(self.c) - 2, 0, -1):
            h = h * t + self.dc[k]
        return f, 2 * z * h

    def fdf(self, z, depth: int = 0):
        """Return (F(z), F'(z)); points beyond reach give nan."""
        z = np.asarray(z, dtype=complex)
        f = np.full(z.shape, np.nan + 0j)
        df = np.full(z.shape, np.nan + 0j)
        near = np.abs(z) <= self.radius
        if near.any():
            f[near], df[near] = self._direct(z[near])
        far = ~near & np.isfinite(z)
        if far.any() and depth < self.max_depth:
            w = self.lam * z[far]
            u, du = self.fdf(w, depth + 1)
            v, dv = self.fdf(u, depth + 1)
            f[far] = -v / self.lam
            df[far] = -dv * du
        return f, df

    def f(self, z):
        return self.fdf(z)[0]


# -- constants ---------------------------------------------------------------

def _real_root(fun, lo, hi, dfun, width=mpf(2) ** -20):
    flo, fhi = fun(lo), fun(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if (flo > 0) == (fhi > 0):
        raise RootNotBracketed(f"no sign change on [{mpmath.nstr(lo, 6)}, {mpmath.nstr(hi, 6)}]")
    while hi - lo > width:
        mid = (lo + hi) / 2
        fm = fun(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    x = (lo + hi) / 2
    eps = mpf(2) ** (-mpmath.mp.prec + 8)
    for _ in range(60):
        d = dfun(x)
        if d == 0:
            break
        step = fun(x) / d
        x -= step
        if abs(step) <= eps * max(1, abs(x)):
            break
    return x


def extract_constants(series: EvenSeries) -> tuple[mpf, mpf, mpf]:
    """Return (lambda, x0, a) and verify the standard identities to 1e-9."""
    with mpmath.workprec(series.prec):
        lam = -sc.eval(series, 1).real
        probe = FeigenbaumMap(series, lam, mpf(0), mpf(0), mpf(0))
        f = lambda x: probe.value(x).real  # noqa: E731
        df = lambda x: probe.deriv(x).real  # noqa: E731
        x0 = _real_root(f, mpf(0), mpf(1), df)
        target = -x0 / lam
        a = _real_root(lambda x: f(x) - target, mpf(1), x0 / lam, df)
        checks = {
            "F(1) = -lambda": f(1) + lam,
            "F(lambda x0) = x0": f(lam * x0) - x0,
            "F(x0/lambda) = -1/lambda": f(x0 / lam) + 1 / lam,
            "F'(x0/lambda) = 0": df(x0 / lam),
            "F'(a/lambda) = 0": df(a / lam),
            "F(a/lambda) = 1/lambda^2": f(a / lam) - 1 / lam ** 2,
        }
        bad = {k: v for k, v in checks.items() if abs(v) > IDENTITY_TOL}
        if bad:
            raise IdentityCheckFailed(", ".join(f"{k}: {mpmath.nstr(v, 3)}" for k, v in bad.items()))
        return lam, x0, a


def residual_grid(rho, count: int = 64) -> list:
    """Deterministic grid of ``count`` points in the closed disk of radius rho/2."""
    rings = 8
    per = count // rings
    pts = []
    for j in range(rings):
        r = mpf(rho) / 2 * (j + 1) / rings
        for i in range(per):
            theta = 2 * mpmath.pi * (i + mpf(j % 2) / 2) / per
            pts.append(mpmath.mpc(r * mpmath.cos(theta), r * mpmath.sin(theta)))
    return pts


def functional_residual(series: EvenSeries, lam, rho=1) -> mpf:
    """sup over the grid of |F(z) + F(F(lambda z))/lambda|."""
    with mpmath.workprec(series.prec):
        worst = mpf(0)
        for z in residual_grid(rho):
            v = sc.eval(series, z) + sc.eval(series, sc.eval(series, lam * z)) / lam
            worst = max(worst, abs(v))
        return worst


def solve_fixed_point(cfg: SolverConfig | None = None, initial: EvenSeries | None = None,
                      log: SolveLog | None = None) -> FeigenbaumMap:
    cfg = cfg or SolverConfig()
    series = newton_solve(cfg, initial, log)
    lam, x0, a = extract_constants(series)
    res = functional_residual(series, lam, cfg.rho)
    if res > max(cfg.tol, mpf(2) ** (-cfg.precision_bits // 2)) * 1000:
        raise NoConvergence(f"pointwise residual {mpmath.nstr(res, 5)} above tolerance")
    return FeigenbaumMap(series, lam, x0, a, res)


# -- orbit shortcut ----------------------------------------------------------

def shortcut_iterate(fmap: FeigenbaumMap, z, m: int) -> mpc:
    """``F^(2^m)(z) = (-lambda)^m F(z / lambda^m)`` in a single evaluation."""
    with mpmath.workprec(fmap.prec):
        w = mpmath.mpmathify(z) / fmap.lam ** m
        return (-fmap.lam) ** m * sc.eval(fmap.series, w)


def shortcut_deriv(fmap: FeigenbaumMap, z, m: int) -> mpc:
    """Derivative of the shortcut: ``(-1)^m F'(z / lambda^m)``."""
    with mpmath.workprec(fmap.prec):
        w = mpmath.mpmathify(z) / fmap.lam ** m
        return (-1) ** m * sc.eval_deriv(fmap.series, w)


# -- coefficient cache -------------------------------------------------------

def _dec(x: mpf, prec: int) -> str:
    digits = int(prec * math.log10(2)) + 3
    with mpmath.workprec(prec):
        return mpmath.libmp.to_str(mpf(x)._mpf_, digits)


def save_map(fmap: FeigenbaumMap, path: str | Path) -> None:
    prec = fmap.prec
    lines = [f"FEIGF 1 {fmap.degree} {prec} {_dec(fmap.series.rho, 64)}"]
    lines += [f"{k} {_dec(c, prec)}" for k, c in enumerate(fmap.series.coeffs)]
    lines += [f"lambda {_dec(fmap.lam, prec)}", f"x0 {_dec(fmap.x0, prec)}",
              f"a {_dec(fmap.a, prec)}", f"residual {_dec(fmap.residual, 64)}"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_map(path: str | Path, revalidate: bool = True) -> FeigenbaumMap:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    head = text[0].split()
    if len(head) != 5 or head[0] != "FEIGF" or head[1] != "1":
        raise CacheError(f"{path}: bad header")
    n, prec = int(head[2]), int(head[3])
    with mpmath.workprec(prec):
        rho = mpf(head[4])
        coeffs = []
        named = {}
        for line in text[1:]:
            key, val = line.split()
            if key.isdigit():
                if int(key) != len(coeffs):
                    raise CacheError(f"{path}: coefficient index out of order")
                coeffs.append(mpf(val))
            else:
                named[key] = mpf(val)
        if len(coeffs) != n + 1 or set(named) != {"lambda", "x0", "a", "residual"}:
            raise CacheError(f"{path}: incomplete cache")
        err = mpf(10) ** (-int(prec * math.log10(2)))
        series = EvenSeries(tuple(coeffs), rho, err, prec)
        fmap = FeigenbaumMap(series, named["lambda"], named["x0"], named["a"], named["residual"])
        if revalidate:
            res = functional_residual(series, fmap.lam)
            if res > max(10 * named["residual"], mpf(2) ** (-prec // 2)):
                raise CacheError(f"{path}: residual {mpmath.nstr(res, 5)} does not revalidate")
            if abs(sc.eval(series, 1).real + fmap.lam) > mpf(2) ** (-prec // 2):
                raise CacheError(f"{path}: lambda inconsistent with coefficients")
    return fmap
