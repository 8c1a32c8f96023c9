import random

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mpf

from feigenjet import fixed_point_solver as fps
from feigenjet import series_core as sc
from feigenjet.fixed_point_solver import SolverConfig

# independent collocation solve (tests/oracles/collocation.py, degree 60, 200 bits)
ORACLE_LAMBDA = mpf("0.3995352805231344898575804686336937194335")
ORACLE_C1 = mpf("-1.527632997036301454035890310160257274975")
ORACLE_X0 = mpf("0.8323672369053164248490954462761044873784")


@pytest.fixture(scope="module")
def f40():
    return fps.solve_fixed_point(SolverConfig(degree=40, precision_bits=256))


def test_solver_matches_oracle(f40):
    assert f"{1 / float(f40.lam):.5g}" == "2.5029"
    assert abs(f40.lam - ORACLE_LAMBDA) <= 1e-10
    assert abs(f40.series.coeffs[1] - ORACLE_C1) <= 1e-10
    assert abs(f40.x0 - ORACLE_X0) <= 1e-9
    assert abs(f40.lam * (1 / f40.lam) - 1) <= 1e-12


def test_solver_residual(f40):
    assert f40.residual <= 1e-12
    assert fps.functional_residual(f40.series, f40.lam) <= 1e-12


def test_normalization_and_ordering(fmap):
    assert fmap.series.coeffs[0] == 1
    assert fmap.lam * fmap.x0 < fmap.x0 < 1 < fmap.a < fmap.x0 / fmap.lam


def test_renorm_apply_fixed(fmap):
    r = fps.renorm_apply(fmap.series)
    diff = sc.sub(r, fmap.series)
    assert sc.l1_norm(diff.__class__(diff.coeffs, 1, 0, diff.prec), 1) <= 1e-30


def test_renorm_apply_normalization(fmap):
    assert abs(fps.renorm_apply(fmap.series).coeffs[0] - 1) <= 1e-60
    assert abs(fmap.value(fmap.value(0)) + fmap.lam) <= 1e-60


def test_renorm_apply_errors():
    g = sc.EvenSeries.from_values([1, -1], rho=2, prec=128)  # g(1) = 0
    with pytest.raises(fps.DegenerateMap):
        fps.renorm_apply(g)
    with pytest.raises(ValueError):
        fps.renorm_apply(sc.EvenSeries.from_values([2, -1], rho=2))


def test_solver_no_convergence():
    with pytest.raises(fps.NoConvergence):
        fps.solve_fixed_point(SolverConfig(degree=12, precision_bits=128, max_iters=1))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(degree=5)
    with pytest.raises(ValueError):
        SolverConfig(precision_bits=32)


def test_identities(fmap):
    lam, x0, a = fmap.lam, fmap.x0, fmap.a
    f, df = fmap.value, fmap.deriv
    assert f(0) == 1
    assert abs(f(1) + lam) <= 1e-9
    assert abs(f(lam * x0) - x0) <= 1e-9
    assert abs(f(x0 / lam) + 1 / lam) <= 1e-9
    assert abs(f(a / lam) - 1 / lam ** 2) <= 1e-9
    assert abs(df(x0 / lam)) <= 1e-9
    assert abs(df(a / lam)) <= 1e-9


def test_critical_points(fmap):
    # F' changes sign only at x0/lam and a/lam inside (0, x0/lam^2)
    fm = fmap.fast()
    lam, x0, a = float(fmap.lam), float(fmap.x0), float(fmap.a)
    xs = np.linspace(1e-4, x0 / lam ** 2 * (1 - 1e-4), 10_000)
    d = fm.fdf(xs.astype(complex))[1].real
    flips = xs[1:][np.sign(d[1:]) != np.sign(d[:-1])]
    assert len(flips) == 2
    assert abs(flips[0] - x0 / lam) < 1e-3 and abs(flips[1] - a / lam) < 1e-3


def test_extract_constants_bracket():
    bad = sc.EvenSeries.from_values([1, 0.5], rho=2, prec=128)
    with pytest.raises((fps.RootNotBracketed, ValueError)):
        fps.extract_constants(bad)


def test_shortcut_examples(fmap):
    z = mpmath.mpc("0.05", "0.02")
    assert fps.shortcut_iterate(fmap, z, 0) == fmap.value(z)
    assert abs(fps.shortcut_iterate(fmap, 0, 1) + fmap.lam) <= 1e-60
    w = z
    for _ in range(8):
        w = fmap.value(w)
    assert abs(fps.shortcut_iterate(fmap, z, 3) - w) <= 1e-9


def test_shortcut_deriv_examples(fmap):
    z = mpmath.mpc("0.05", "0.02")
    assert fps.shortcut_deriv(fmap, z, 0) == fmap.deriv(z)
    x = mpf("0.03")
    with mpmath.workprec(fmap.prec):
        h = mpf(2) ** -60
        fd = (fps.shortcut_iterate(fmap, x + h, 1) - fps.shortcut_iterate(fmap, x - h, 1)) / (2 * h)
    assert abs(fd - fps.shortcut_deriv(fmap, x, 1)) <= 1e-7
    w, d = z, mpf(1)
    for _ in range(8):
        d *= fmap.deriv(w)
        w = fmap.value(w)
    assert abs(fps.shortcut_deriv(fmap, z, 3) - d) <= 1e-8


def test_cache_roundtrip(fmap, tmp_path):
    p = tmp_path / "f.txt"
    fps.save_map(fmap, p)
    g = fps.load_map(p)
    assert g.series.coeffs == fmap.series.coeffs
    assert g.lam == fmap.lam
    assert p.read_text().startswith(f"FEIGF 1 {fmap.degree} {fmap.prec} ")
    fps.save_map(g, tmp_path / "g.txt")
    assert (tmp_path / "g.txt").read_bytes() == p.read_bytes()


def test_cache_revalidation(fmap, tmp_path):
    p = tmp_path / "f.txt"
    fps.save_map(fmap, p)
    lines = p.read_text().splitlines()
    lines[3] = "2 " + str(float(fmap.series.coeffs[2]) * 1.001)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(fps.CacheError):
        fps.load_map(p)
    p.write_text("FEIGX 1\n")
    with pytest.raises(fps.CacheError):
        fps.load_map(p)


def test_solver_deterministic(f40, tmp_path):
    a, b = f40, fps.solve_fixed_point(SolverConfig(degree=40, precision_bits=256))
    fps.save_map(a, tmp_path / "a")
    fps.save_map(b, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def _random_points(seed, count, radius):
    rng = random.Random(seed)
    out = []
    while len(out) < count:
        z = complex(rng.uniform(-radius, radius), rng.uniform(-radius, radius))
        if abs(z) <= radius:
            out.append(mpmath.mpc(z))
    return out


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_shortcut_equivalence(fmap, m):
    radius = float(fmap.lam) ** 4 * float(fmap.series.rho)
    worst_v = worst_d = 0
    for z in _random_points(m, 100, radius):
        w, d = z, mpf(1)
        for _ in range(2 ** m):
            d *= fmap.deriv(w)
            w = fmap.value(w)
        worst_v = max(worst_v, abs(fps.shortcut_iterate(fmap, z, m) - w))
        worst_d = max(worst_d, abs(fps.shortcut_deriv(fmap, z, m) - d))
    assert worst_v <= 1e-9 and worst_d <= 1e-8


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9))
def test_evenness_exact(fmap, x, y):
    z = mpmath.mpc(x, y)
    assert sc.eval(fmap.series, z) == sc.eval(fmap.series, -z)


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9))
def test_fast_map_agrees(fmap, x, y):
    z = complex(x, y)
    f, df = fmap.fast().fdf(np.array([z]))
    assert abs(f[0] - complex(fmap.value(z))) <= 1e-12
    assert abs(df[0] - complex(fmap.deriv(z))) <= 1e-11
