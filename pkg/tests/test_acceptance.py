"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as they are produced and again, collected, in the
pytest terminal summary.
"""
import csv
import io
import random
import time

import mpmath
import numpy as np
import pytest
from mpmath import mpf

from feigenjet import fixed_point_solver as fps
from feigenjet import region_atlas as ra
from feigenjet import render_cli as cli
from feigenjet.fixed_point_solver import SolverConfig
from feigenjet.region_atlas import TileColor

# independent collocation solve (tests/oracles/collocation.py, degree 60, 200 bits)
ORACLE_LAMBDA = mpf("0.3995352805231344898575804686336937194335")

# verification frame: 64 x 64 pixels at n = 10 across the real axis near x = 1.25
FRAME_N = 10
FRAME = cli.Window.from_pixels(5088, -32, 64, 64, FRAME_N)
BENCH_NS = (8, 12, 16, 20)

RESULTS: dict[int, str] = {}


def report(k: int, ok: bool, detail: str) -> None:
    line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[k] = line
    print(line)


@pytest.fixture(scope="module")
def frame_image(caches, consts):
    return cli.render_frame(FRAME_N, FRAME, caches, consts)


@pytest.fixture(scope="module")
def frame_oracle(caches):
    t = time.perf_counter()
    oracle = cli.reference_for_window(FRAME_N, FRAME, caches)
    oracle.build_seconds = time.perf_counter() - t
    return oracle


def test_c01_fixed_point_accuracy():
    t = time.perf_counter()
    f = fps.solve_fixed_point(SolverConfig(degree=40, precision_bits=256))
    secs = time.perf_counter() - t
    inv = f"{1 / float(f.lam):.5g}"
    err = float(abs(f.lam - ORACLE_LAMBDA))
    ok = inv == "2.5029" and err <= 1e-10 and secs <= 60
    report(1, ok, f"1/lambda = {inv}, |lambda - oracle| = {err:.1e}, solve {secs:.1f} s")
    assert ok


def test_c02_functional_residual(fmap):
    grid = fps.residual_grid(fmap.series.rho)
    res = float(fps.functional_residual(fmap.series, fmap.lam, fmap.series.rho))
    ok = len(grid) == 64 and res <= 1e-12
    report(2, ok, f"sup residual on {len(grid)} points = {res:.1e}")
    assert ok


def test_c03_identities(fmap):
    with mpmath.workprec(fmap.prec):
        lam, x0, a = fmap.lam, fmap.x0, fmap.a
        f, df = fmap.value, fmap.deriv
        f0 = f(0)
        errs = [abs(f(1) + lam), abs(f(lam * x0) - x0), abs(f(x0 / lam) + 1 / lam),
                abs(f(a / lam) - 1 / lam ** 2), abs(df(x0 / lam)), abs(df(a / lam))]
    worst = max(float(v) for v in errs)
    ok = f0 == 1 and worst <= 1e-9
    report(3, ok, f"F(0) == 1: {f0 == 1}, worst of the six identity errors {worst:.1e}")
    assert ok


def test_c04_shortcut_equivalence(fmap):
    radius = float(fmap.lam) ** 4 * float(fmap.series.rho)
    rng = random.Random(2024)
    worst_v = worst_d = 0.0
    with mpmath.workprec(fmap.prec):
        for m in range(1, 5):
            count = 0
            while count < 100:
                z = complex(rng.uniform(-radius, radius), rng.uniform(-radius, radius))
                if abs(z) > radius:
                    continue
                count += 1
                w, d = mpmath.mpc(z), mpf(1)
                for _ in range(2 ** m):
                    d *= fmap.deriv(w)
                    w = fmap.value(w)
                worst_v = max(worst_v, float(abs(fps.shortcut_iterate(fmap, z, m) - w)))
                worst_d = max(worst_d, float(abs(fps.shortcut_deriv(fmap, z, m) - d)))
    ok = worst_v <= 1e-9 and worst_d <= 1e-8
    report(4, ok, f"max value error {worst_v:.1e}, max derivative error {worst_d:.1e} (m = 1..4, 100 points each)")
    assert ok


def test_c05_classifier_soundness(frame_image, frame_oracle):
    rep = cli.verify_report(frame_image, frame_oracle)
    ok = rep["contradictions"] == 0 and rep["unknown_fraction"] <= 0.15
    report(5, ok, f"contradictions {rep['contradictions']}, unknown {rep['unknown_fraction']:.1%} of "
                  f"{rep['cells_in_q']} cells (near {rep['certified_near']}, far {rep['certified_far']}), "
                  f"oracle {frame_oracle.build_seconds:.0f} s")
    assert ok


def test_c06_output_contract(run_cli, tmp_path, frame_oracle):
    # the frame as written by the command line, read back from the PGM file
    out = tmp_path / "frame.pgm"
    r = run_cli("render", "--n", str(FRAME_N), f"--window={FRAME}", "--out", str(out))
    assert r.returncode == 0, r.stderr
    image = cli.read_pgm(out) == 0
    v = frame_oracle.violations(np.flipud(image))
    ok = image.shape == frame_oracle.shape and v["filled_far"] == 0 and v["blank_near"] == 0
    report(6, ok, f"filled at certified distance >= 2^-n-1: {v['filled_far']}, "
                  f"blank at certified distance <= 2^-n-2: {v['blank_near']}")
    assert ok


def test_c07_polytime_evidence(run_cli, tmp_path, consts):
    out = tmp_path / "bench.csv"
    t = time.perf_counter()
    r = run_cli("bench", "--ns", ",".join(map(str, BENCH_NS)), "--out", str(out))
    secs = time.perf_counter() - t
    assert r.returncode == 0, r.stderr
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    ns = [int(row["n"]) for row in rows]
    steps = [int(row["steps_shortcut"]) for row in rows]
    within = all(s <= consts.max_steps(n) for n, s in zip(ns, steps))
    r2 = cli.quadratic_fit_r2(ns, steps)
    naive_ok = all(int(row["iters_naive"]) >= 2 ** (int(row["level"]) - 1) for row in rows)
    t8 = float(rows[0]["time_ms"])
    ok = ns == list(BENCH_NS) and within and r2 >= 0.9 and naive_ok and secs <= 600 and t8 < 10_000
    levels = [int(row["level"]) for row in rows]
    naive = [f"{row['iters_naive']}({row['naive_source'][0]})" for row in rows]
    report(7, ok, f"steps {steps} <= (A n + B)^2 + 2 = {[consts.max_steps(n) for n in ns]}, quadratic R^2 {r2:.3f}; "
                  f"levels {levels}, naive first return {naive}; bench {secs:.0f} s")
    assert ok


@pytest.mark.xfail(strict=True, reason="J is not exactly lambda-self-similar on a unit-scale window; see README")
def test_c08_self_similarity(caches, consts):
    # informational: a window small enough to be filled solid passes
    small_n = 10
    small = cli.Window.parse("-0.0078125,-0.0078125,0.0078125,0.0078125")
    tiny = cli.selfsim_check(cli.render_frame(small_n, small, caches, consts), float(caches.fmap.lam), small_n)
    print(f"  half-width 2^-7 at n = {small_n}: Hausdorff {tiny.hausdorff:.1f} px")
    # unit-scale window; n = 6 keeps the render affordable, the defect grows with n
    n = 6
    w = cli.Window.parse("-1,-1,1,1")
    rep = cli.selfsim_check(cli.render_frame(n, w, caches, consts), float(caches.fmap.lam), n)
    report(8, rep.passed, f"unit-scale window at n = {n}: Hausdorff {rep.hausdorff:.1f} px "
                          f"(scaled->full {rep.scaled_to_full:.1f}, full->scaled {rep.full_to_scaled:.1f}); "
                          f"tolerance {rep.tolerance:.0f} px; half-width 2^-7 at n = 10: {tiny.hausdorff:.1f} px")
    assert rep.passed


def test_c09_symmetry(caches, consts, frame_image):
    conj = cli.render_frame(FRAME_N, FRAME.conjugate(FRAME_N), caches, consts)
    frame_ok = np.array_equal(frame_image, np.flipud(conj))
    w = cli.Window.parse("-0.5,-0.5,0.5,0.5")
    xs, ys = w.pixel_grid(9)
    # rows run top-down; the last row and first column (index -2^10) have no mirror partner
    tiles = cli.render_tiles(9, w, caches.fmap)[:-1, 1:]
    lut = np.zeros(3, dtype=tiles.dtype)
    lut[TileColor.PLUS] = TileColor.MINUS
    lut[TileColor.MINUS] = TileColor.PLUS
    lut[TileColor.BOUNDARY] = TileColor.BOUNDARY
    neg_ok = np.array_equal(tiles, tiles[::-1, ::-1])
    conj_ok = np.array_equal(tiles, lut[tiles[::-1, :]])
    # second route: colour every pixel by evaluating F there, without mirroring
    zz = (xs[None, 1:] + 1j * ys[:-1, None]).ravel()
    f, df = caches.fmap.fast().fdf(zz)
    direct = ra.tile_raster_values(f, df, 0.5 * float(xs[1] - xs[0])).reshape(tiles.shape)
    clear = (tiles != TileColor.BOUNDARY) & (direct != TileColor.BOUNDARY)
    direct_ok = np.array_equal(tiles[clear], direct[clear])
    kinds = {int(v) for v in np.unique(tiles)}
    ok = frame_ok and neg_ok and conj_ok and direct_ok and len(kinds) == 3
    report(9, ok, f"frame vs conjugate window identical: {frame_ok}; tiles at n = 9: "
                  f"z -> -z {neg_ok}, conjugation swaps colours {conj_ok}, "
                  f"matches direct evaluation off the boundary {direct_ok}")
    assert ok


def test_c10_determinism(run_cli, tmp_path):
    outputs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        d.mkdir()
        runs = [
            ("render", "--n", str(FRAME_N), f"--window={FRAME}", "--out", str(d / "frame.pgm")),
            ("tiles", "--n", "7", "--window=-0.5,-0.5,0.5,0.5", "--out", str(d / "tiles.pgm")),
            ("verify", "--n", "5", "--window", "0.5,0,0.75,0.25", "--out", str(d / "verify.csv")),
            ("bench", "--ns", "6,8", "--probes", "16", "--out", str(d / "bench.csv")),
        ]
        for args in runs:
            r = run_cli(*args)
            assert r.returncode == 0, r.stderr
        outputs.append(d)
    same = {name: (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()
            for name in ("frame.pgm", "tiles.pgm", "verify.csv")}

    def without_timing(path):
        rows = list(csv.reader(io.StringIO(path.read_text())))
        col = rows[0].index("time_ms")
        return [row[:col] + row[col + 1:] for row in rows]

    same["bench.csv (except time_ms)"] = without_timing(outputs[0] / "bench.csv") == \
        without_timing(outputs[1] / "bench.csv")
    ok = all(same.values())
    report(10, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert ok
