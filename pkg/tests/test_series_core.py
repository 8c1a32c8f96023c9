import math

import mpmath
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mpf

from feigenjet import series_core as sc
from feigenjet.series_core import EvenSeries


def ser(*c, rho=1, prec=128):
    return EvenSeries.from_values([mpf(x) for x in c], rho=rho, prec=prec)


coeff = st.floats(-1, 1, allow_nan=False, allow_infinity=False)
poly = st.lists(coeff, min_size=1, max_size=6)


def test_eval_constant():
    assert sc.eval(ser(1), mpmath.mpc(0.3, 0.4)) == 1


def test_eval_square():
    assert sc.eval(ser(0, 1, rho=3), 2) == 4


def test_eval_domain():
    with pytest.raises(sc.DomainExceeded):
        sc.eval(ser(1, 1), 1.5)


def test_eval_deriv_examples():
    assert sc.eval_deriv(ser(0, 1, rho=4), 3) == 6
    assert sc.eval_deriv(ser(7), mpmath.mpc(0.2, 0.1)) == 0


def test_compose_square():
    f = ser(0, 1, rho=2)
    g = ser(0, 1, rho=1)
    h = sc.compose(f, g, 4)
    assert [float(c) for c in h.coeffs[:3]] == [0, 0, 1]


def test_compose_identity_carrier():
    # g = [0, 1] is t -> t on the carrier t = z^2: f(g) read in t reproduces f
    f = ser(1, -0.5, 0.25, rho=2)
    h = sc.compose(f, ser(0, 1, rho=1), 8)
    assert [float(c) for c in h.coeffs[::2]] == [1, -0.5, 0.25, 0, 0]
    assert all(c == 0 for c in h.coeffs[1::2])


def test_compose_constant_term():
    f = ser(1, -1, rho=2)  # 1 - z^2
    g = ser(1, 0.25, rho=0.5)
    h = sc.compose(f, g, 6)
    # by hand: 1 - (1 + z^2/4)^2 = -z^2/2 - z^4/16
    assert h.coeffs[:3] == (0, -0.5, -0.0625)


def test_compose_containment():
    with pytest.raises(sc.DomainExceeded):
        sc.compose(ser(1, 1, rho=1), ser(2, 1, rho=1), 4)


def test_scale_arg_examples():
    f = sc.scale_arg(ser(0, 1, rho=2), 2)
    assert float(f.coeffs[1]) == 4
    assert float(f.rho) == 1
    g = ser(1, -1.5, 0.1)
    assert sc.scale_arg(g, 1).coeffs == g.coeffs


def test_l1_norm_examples():
    assert sc.l1_norm(ser(-3), 2) == 3
    assert sc.l1_norm(ser(0, 1), mpf("0.75")) == mpf("0.5625")
    assert sc.l1_norm(ser(1, 2), mpf("0.5")) == mpf("1.5")


def test_round_coeffs_examples():
    f = ser("0.123456")
    r = sc.round_coeffs(f, 3)
    with mpmath.workprec(128):
        assert r.coeffs[0] == mpf("0.123")
        assert r.coeff_err >= f.coeff_err + mpf("0.0005")
    assert sc.round_coeffs(f, 200).coeffs == f.coeffs
    with pytest.raises(ValueError):
        sc.round_coeffs(f, 0)


def test_round_coeffs_norm_bound():
    f = ser("0.31415926", "-1.23456789", "0.05555555")
    r = sc.round_coeffs(f, 4)
    rho = mpf("0.9")
    bound = sum(mpf(10) ** -4 / 2 * rho ** (2 * k) for k in range(3))
    assert sc.l1_norm(EvenSeries(tuple(a - b for a, b in zip(f.coeffs, r.coeffs)), 1, 0, 128), rho) <= bound


def test_truncate_examples():
    f = ser(1, 2, 3)
    assert sc.truncate(f, 10) is f
    t = sc.truncate(f, 0)
    assert t.coeffs == (1,)
    assert t.coeff_err >= 5  # tail 2 + 3 at rho = 1
    with pytest.raises(ValueError):
        sc.truncate(f, -1)


def test_truncate_geometric_tail():
    q = mpf("0.5")
    f = ser(*[q ** k for k in range(30)], rho=1)
    t = sc.truncate(f, 9)  # keeps k = 0..4
    # closed form of the dropped tail at rho = 1: sum_{k=5}^{29} q^k
    closed = (q ** 5 - q ** 30) / (1 - q)
    assert abs(t.coeff_err - closed) < 1e-25


def test_tail_bound_closed_form():
    f = ser(1, 1, 1)
    b = sc.tail_bound(f, 1, 2, 10)
    with mpmath.workprec(128):
        q = mpf(1) / 4
        assert abs(b - 10 * q ** 3 / (1 - q)) < 1e-30


def test_precision_floor():
    with pytest.raises(ValueError):
        ser(1, prec=32)


def test_double_double_split():
    f = ser(mpf(1) / 3, prec=200)
    hi, lo = sc.to_double_double(f)
    with mpmath.workprec(200):
        assert abs(mpf(hi[0]) + mpf(lo[0]) - f.coeffs[0]) < mpf(2) ** -100


@settings(max_examples=40, deadline=None)
@given(poly, st.floats(0.2, 0.9))
def test_norm_equivalence(c, rho):
    f = ser(*c, rho=2)
    rho2 = 1.8
    pts = [rho * mpmath.expjpi(2 * k / 256) for k in range(256)]
    sup_in = max(abs(sc.eval(f, z)) for z in pts)
    sup_out = max(abs(sc.eval(f, rho2 * mpmath.expjpi(2 * k / 256))) for k in range(256))
    norm = sc.l1_norm(f, rho)
    assert sup_in <= norm + 1e-10
    # Cauchy: |c_k| <= M / rho2^(2k); the grid underestimates M by at most its chord error
    slack = 1 + 2 * math.pi / 256 * 2 * len(c)
    assert norm <= rho2 / (rho2 - rho) * sup_out * slack + 1e-10


@settings(max_examples=25, deadline=None)
@given(st.lists(coeff, min_size=1, max_size=4), st.lists(st.floats(-0.3, 0.3), min_size=1, max_size=4),
       st.lists(st.floats(-0.3, 0.3), min_size=1, max_size=4))
def test_compose_associative(a, b, c):
    # radii chosen so every containment precondition holds for the drawn ranges
    f = ser(*a, rho=2)
    g = ser(*b, rho=1)
    h = ser(*c, rho=0.75)
    deg = 24
    lhs = sc.compose(sc.compose(f, g, deg), h, deg)
    rhs = sc.compose(f, sc.compose(g, h, deg), deg)
    diff = EvenSeries(tuple(x - y for x, y in zip(lhs.coeffs, rhs.coeffs)), 1, 0, 128)
    assert sc.l1_norm(diff, mpf("0.5")) <= lhs.coeff_err + rhs.coeff_err + 1e-25


@settings(max_examples=40, deadline=None)
@given(poly, st.floats(-0.9, 0.9), st.floats(-0.9, 0.9))
def test_deriv_matches_differences(c, x, y):
    f = ser(*c, rho=2, prec=192)
    z = mpmath.mpc(x, y)
    h = mpf(2) ** -64
    with mpmath.workprec(192):
        fd = (sc.eval(f, z + h) - sc.eval(f, z - h)) / (2 * h)
    d = sc.eval_deriv(f, z)
    assert abs(fd - d) <= 1e-8 * max(1, abs(d))


@settings(max_examples=40, deadline=None)
@given(poly, st.integers(1, 12), st.integers(0, 8))
def test_error_never_decreases(c, l, n):
    f = ser(*c)
    assert sc.round_coeffs(f, l).coeff_err >= f.coeff_err
    assert sc.truncate(f, n).coeff_err >= f.coeff_err


@settings(max_examples=40, deadline=None)
@given(poly, st.floats(-2, 2), st.floats(-2, 2))
def test_evenness(c, x, y):
    f = ser(*c, rho=3)
    z = mpmath.mpc(x, y)
    assert sc.eval(f, z) == sc.eval(f, -z)
