import numpy as np
import pytest

from feigenjet import reference_oracle as ro


def test_cell_centers_layout():
    c = ro.cell_centers(-1, 2, 3, 2, 2)
    assert c.shape == (2, 3)
    assert c[0, 0] == complex(-1 / 16, 2 / 16)
    assert c[1, 2] == complex(1 / 16, 3 / 16)


def test_lower_bound_far_point(fmap, atlas):
    lo, iters = ro.lower_bounds(fmap, atlas, np.array([10.0 + 0j]), 4, 256)
    assert lo[0] > 1
    assert iters[0] >= 0


def test_lower_bound_zero_on_julia_set(fmap, atlas):
    # 0 and 1 lie in J: no disk around them escapes
    lo, _ = ro.lower_bounds(fmap, atlas, np.array([0j, 1 + 0j]), 6, 1024)
    assert np.all(lo == 0)


def test_upper_bound_from_real_interval(fmap, atlas):
    pts, _ = ro.j_points(fmap, atlas, ro.cell_centers(-8, -2, 24, 4, 4).ravel(), 512)
    assert len(pts) > 0
    up = ro.upper_bounds(fmap, atlas, np.array([0.1 + 0j, 0.2 + 0.01j]), pts)
    assert up[0] <= 0.05
    assert up[1] <= 0.06
    assert np.all(ro.upper_bounds(fmap, atlas, np.array([0j]), np.empty(0, dtype=complex)) == np.inf)


def test_j_points_are_in_julia_set(fmap, atlas):
    # a preimage of the invariant interval maps into it
    pts, _ = ro.j_points(fmap, atlas, np.array([0.3 + 0.45j, -0.6 + 0.2j, 0.05 + 0.9j]), 512)
    fm = fmap.fast()
    for p in pts:
        w = complex(p)
        for _ in range(40):
            if abs(w.imag) < 1e-9 and -float(fmap.lam) - 1e-9 <= w.real <= 1 + 1e-9:
                break
            w = complex(fm.f(np.array([w]))[0])
        assert abs(w.imag) < 1e-9 and -float(fmap.lam) - 1e-9 <= w.real <= 1 + 1e-9


def test_lower_not_above_upper(fmap, atlas):
    o = ro.build_reference(5, fmap, atlas, -16, -4, 32, 8)
    assert np.all(o.lower <= o.upper + 1e-12)
    st = o.status
    assert st[o.lower > o.spacing].tolist() == [ro.FAR] * int((o.lower > o.spacing).sum())
    # cells on the real segment through J are certified near
    assert np.all(st[-o.j0, -o.i0:] == ro.NEAR)  # row j = 0, columns x >= 0
    assert 0 <= o.unknown_fraction() <= 1


def test_violations_shape_and_counts(fmap, atlas):
    o = ro.build_reference(4, fmap, atlas, -4, 10, 8, 4)
    with pytest.raises(ValueError):
        o.violations(np.zeros((3, 3), dtype=bool))
    full = o.violations(np.ones(o.shape, dtype=bool))
    empty = o.violations(np.zeros(o.shape, dtype=bool))
    assert full["blank_near"] == 0 and empty["filled_far"] == 0
    assert full["filled_far"] == int((o.lower >= 2 * o.spacing).sum())


def test_reference_limit(fmap, atlas):
    with pytest.raises(ValueError):
        ro.build_reference(13, fmap, atlas, 0, 0, 1, 1)
