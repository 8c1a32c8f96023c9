"""Command-line driver: caches, frame rendering, tiles, verification and benchmarks.

Subcommands::

    feigenjet solve   [--degree N]                 coefficient cache
    feigenjet atlas                                region atlas cache
    feigenjet render  --n N [--window ...] --out image.pgm
    feigenjet tiles   --n N [--window ...] --out tiles.pgm
    feigenjet verify  --n N --window ... --out report.csv
    feigenjet bench   [--ns 8,12,16,20] --out bench.csv

Windows are dyadic rectangles ``x0,y0,x1,y1``; a frame at precision n holds
the pixel centres (i + j i) / 2^(n+2) with x0 <= i/2^(n+2) < x1 and
y0 <= j/2^(n+2) < y1.  Images are binary PGM with the top row first.
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
import time
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from . import orbit_classifier as oc
from . import region_atlas as ra
from .fixed_point_solver import FeigenbaumMap, SolverConfig, load_map, save_map, solve_fixed_point
from .orbit_classifier import ClassifierConstants, PrecisionExhausted
from .reference_oracle import ReferenceOracle, build_reference
from .region_atlas import RegionAtlas

MAP_FILE = "feigenbaum.txt"
ATLAS_FILE = "atlas.txt"
DEFAULT_WINDOW = "-1.625,-1.625,1.625,1.625"
DEFAULT_BENCH_NS = (8, 12, 16, 20)
SELFSIM_TOLERANCE = 4.0
NAIVE_CAP = 1 << 18  # direct iterations measured per probe before extrapolating

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_CACHE = 2
EXIT_INVALID_WINDOW = 3
EXIT_PRECISION = 4


class MissingCache(FileNotFoundError):
    pass


class InvalidWindow(ValueError):
    pass


class WindowTooSmall(ValueError):
    pass


# -- windows -----------------------------------------------------------------

def _dyadic(text: str) -> Fraction:
    try:
        v = Fraction(text.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise InvalidWindow(f"not a number: {text!r}") from exc
    d = v.denominator
    if d & (d - 1):
        raise InvalidWindow(f"{text!r} is not dyadic")
    return v


@dataclass(frozen=True)
class Window:
    x0: Fraction
    y0: Fraction
    x1: Fraction
    y1: Fraction

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise InvalidWindow("window must satisfy x0 < x1 and y0 < y1")

    @classmethod
    def parse(cls, text: str) -> "Window":
        parts = text.split(",")
        if len(parts) != 4:
            raise InvalidWindow("window needs four comma-separated values x0,y0,x1,y1")
        return cls(*(_dyadic(p) for p in parts))

    @classmethod
    def from_pixels(cls, i0: int, j0: int, ni: int, nj: int, n: int) -> "Window":
        s = 2 ** (n + 2)
        return cls(Fraction(i0, s), Fraction(j0, s), Fraction(i0 + ni, s), Fraction(j0 + nj, s))

    def conjugate(self, n: int) -> "Window":
        """Window whose pixel rows are exactly the conjugates of this one's."""
        s = Fraction(1, 2 ** (n + 2))
        return Window(self.x0, -self.y1 + s, self.x1, -self.y0 + s)

    def __str__(self) -> str:
        return ",".join(_fmt(v) for v in (self.x0, self.y0, self.x1, self.y1))

    def index_ranges(self, n: int) -> tuple[range, range]:
        s = 2 ** (n + 2)
        def rng(a, b):
            return range(math.ceil(a * s), math.ceil(b * s))
        return rng(self.x0, self.x1), rng(self.y0, self.y1)

    def pixel_grid(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Column and row coordinates, rows top-down."""
        ir, jr = self.index_ranges(n)
        h = 2.0 ** -(n + 2)
        return np.arange(ir.start, ir.stop) * h, np.arange(jr.stop - 1, jr.start - 1, -1) * h


def _fmt(v: Fraction) -> str:
    # dyadic rationals have exact finite decimal expansions
    s = repr(float(v)) if abs(v.denominator) <= 2 ** 52 else str(v)
    return s


# -- configuration -----------------------------------------------------------

_CONST_KEYS = ("A", "B", "K1", "K2", "c_far")


def _parse_cfg(text: str, where: str) -> dict:
    out = {}
    for k, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{where}:{k}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def load_config(path: str | Path | None = None) -> dict:
    """Built-in defaults overlaid with the optional user file."""
    text = resources.files("feigenjet").joinpath("data/default.cfg").read_text(encoding="utf-8")
    cfg = _parse_cfg(text, "default.cfg")
    if path is not None:
        cfg.update(_parse_cfg(Path(path).read_text(encoding="utf-8"), str(path)))
    return cfg


def constants_from_config(cfg: dict) -> ClassifierConstants:
    return ClassifierConstants(**{k: float(cfg[k]) for k in _CONST_KEYS})


# -- caches ------------------------------------------------------------------

def resolve_cache_dir(arg: str | None) -> Path:
    if arg:
        return Path(arg)
    env = os.environ.get("FEIGENJET_CACHE_DIR")
    return Path(env) if env else Path.cwd() / ".feigenjet-cache"


@dataclass
class Caches:
    fmap: FeigenbaumMap
    atlas: RegionAtlas


def load_caches(cache_dir: Path) -> Caches:
    mp, ap = cache_dir / MAP_FILE, cache_dir / ATLAS_FILE
    for p, cmd in ((mp, "solve"), (ap, "atlas")):
        if not p.exists():
            raise MissingCache(f"{p} not found; run `feigenjet {cmd}` first")
    return Caches(load_map(mp), ra.load_atlas(ap))


# -- outputs -----------------------------------------------------------------

def write_pgm(path: str | Path, image: np.ndarray, maxval: int = 255) -> None:
    """Binary PGM (P5), 8-bit, rows as stored (top row first)."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def bilevel_to_pgm(filled: np.ndarray) -> np.ndarray:
    """Filled pixels black (0), blank white (255)."""
    return np.where(filled, 0, 255).astype(np.uint8)


_TILE_GREY = np.array([64, 192, 0], dtype=np.uint8)  # MINUS, PLUS, BOUNDARY


def write_csv(path: str | Path | None, header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8", newline="")
    return text


# -- jobs --------------------------------------------------------------------

@dataclass
class RenderJob:
    n: int
    window: Window
    mode: str
    output_path: Path | None
    constants: ClassifierConstants
    threads: int = 1
    pixel_mode: str = "adaptive"
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("julia", "tiles", "bench", "solve", "atlas", "verify"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode in ("julia", "tiles", "verify") and self.n < 4:
            raise InvalidWindow("precision n must be at least 4")


def render_frame(n: int, window: Window, caches: Caches, consts: ClassifierConstants,
                 pixel_mode: str = "adaptive", band: int = 64) -> np.ndarray:
    """Boolean image (True = filled), rows top-down.

    Rows are processed in bands; each pixel's decision depends only on its
    centre, so the result does not depend on banding or thread count.
    """
    xs, ys = window.pixel_grid(n)
    if xs.size == 0 or ys.size == 0:
        raise InvalidWindow("window contains no pixel centres at this precision")
    out = np.zeros((ys.size, xs.size), dtype=bool)
    for r in range(0, ys.size, band):
        rows = ys[r:r + band]
        centers = (xs[None, :] + 1j * rows[:, None]).ravel()
        out[r:r + band] = oc.classify_pixels(centers, n, caches.fmap, caches.atlas, consts,
                                             mode=pixel_mode).reshape(rows.size, xs.size)
    return out


def render_tiles(n: int, window: Window, fmap: FeigenbaumMap) -> np.ndarray:
    xs, ys = window.pixel_grid(n)
    return ra.tile_raster(fmap, xs, ys)


def reference_for_window(n: int, window: Window, caches: Caches, budget: int | None = None) -> ReferenceOracle:
    ir, jr = window.index_ranges(n)
    return build_reference(n, caches.fmap, caches.atlas, ir.start, jr.start, len(ir), len(jr), budget=budget)


def verify_report(image: np.ndarray, oracle: ReferenceOracle) -> dict:
    """Compare a top-down frame with the oracle (whose rows run bottom-up)."""
    img = np.flipud(image)
    st = oracle.status
    v = oracle.violations(img)
    inq = oracle.in_q
    from .reference_oracle import FAR, NEAR, UNKNOWN

    return {
        "n": oracle.n_ref,
        "cells": int(st.size),
        "cells_in_q": int(inq.sum()),
        "filled": int(img.sum()),
        "certified_near": int(((st == NEAR) & inq).sum()),
        "certified_far": int(((st == FAR) & inq).sum()),
        "unknown": int(((st == UNKNOWN) & inq).sum()),
        "unknown_fraction": round(oracle.unknown_fraction(), 6),
        "filled_far": int(v["filled_far"]),
        "blank_near": int(v["blank_near"]),
        "contradictions": int(v["filled_far"] + v["blank_near"]),
        "oracle_iterations": int(oracle.iterations.sum()),
    }


# -- self-similarity ---------------------------------------------------------

@dataclass
class SelfSimReport:
    n: int
    window_half_width: float
    scaled_to_full: float
    full_to_scaled: float
    hausdorff: float
    tolerance: float
    passed: bool


def selfsim_check(image: np.ndarray, lam: float, n: int, half_width: float | None = None,
                  tolerance: float = SELFSIM_TOLERANCE) -> SelfSimReport:
    """Pixel Hausdorff distance between S restricted to lam*Omega and lam*S.

    ``image`` is a top-down frame centred on 0 with pixel rows/columns
    j = -N..N-1 (the default-style window [-a, a)^2); Omega is the square of
    the given half-width (default: the whole frame).  lam*S is obtained by
    mapping every filled pixel index k to round(lam k).
    """
    from scipy.ndimage import distance_transform_edt

    img = np.flipud(np.asarray(image, dtype=bool))
    if img.ndim != 2 or img.shape[0] != img.shape[1] or img.shape[0] % 2:
        raise WindowTooSmall("need a square frame centred on 0")
    half = img.shape[0] // 2
    h = 2.0 ** -(n + 2)
    if half_width is None:
        half_width = half * h
    r = int(math.floor(half_width / h))
    if r > half or lam * r < 8:
        raise WindowTooSmall("the lambda-scaled window must span at least 8 pixels")
    idx = np.arange(-half, half)
    inside = np.abs(idx) <= r
    S = img & inside[:, None] & inside[None, :]
    small = np.abs(idx) <= lam * r
    A = S & small[:, None] & small[None, :]
    pts = np.argwhere(S)
    B = np.zeros_like(img)
    B[np.rint(idx[pts[:, 0]] * lam).astype(int) + half, np.rint(idx[pts[:, 1]] * lam).astype(int) + half] = True
    if not A.any() or not B.any():
        d1 = d2 = 0.0 if A.any() == B.any() else math.inf
    else:
        d1 = float(distance_transform_edt(~B)[A].max())
        d2 = float(distance_transform_edt(~A)[B].max())
    hd = max(d1, d2)
    return SelfSimReport(n, r * h, d1, d2, hd, tolerance, hd <= tolerance)


# -- bench -------------------------------------------------------------------

BENCH_HEADER = ["n", "steps_shortcut", "time_ms", "iters_naive", "naive_source", "level", "probes", "exhausted"]


def bench_probes(n: int, count: int = 64) -> np.ndarray:
    """Points on the circle |z| = 2^-n, off the axes."""
    ang = (np.arange(count) + 0.5) * (2 * math.pi / count)
    return 2.0 ** -n * np.exp(1j * ang)


def naive_first_return(fmap: FeigenbaumMap, atlas: RegionAtlas, z: complex, m: int, cap: int = NAIVE_CAP):
    """Direct iterations of F until the orbit of z in W^(m) re-enters W^(m-1).

    Returns (count, measured); past ``cap`` the count is the analytic
    first-return time 2^(m-1).
    """
    if m < 1:
        return 1, True
    if 2 ** (m - 1) > cap:
        return 2 ** (m - 1), False
    fm = fmap.fast()
    W = atlas.W_boundary
    lam = float(fmap.lam)
    scale = lam ** -(m - 1)
    p = np.array([complex(z)])
    for k in range(1, cap + 1):
        p = fm.f(p)
        if float(W.signed_distance(p[0] * scale)[0]) > 0:
            return k, True
    return 2 ** (m - 1), False


def deepest_level(atlas: RegionAtlas, z: complex, m_max: int = 200) -> int:
    """m(z): the deepest scaled domain lam^m W' containing z (by the polyline)."""
    lam = atlas.lam
    W = atlas.W_boundary
    m = 0
    while m < m_max and float(W.signed_distance(complex(z) / lam ** (m + 1))[0]) > 0:
        m += 1
    return m


def bench(ns, caches: Caches, consts: ClassifierConstants, probes: int = 64) -> list[list]:
    rows = []
    for n in ns:
        zs = bench_probes(n, probes)
        oc.classify_batch(zs[:1], n, caches.fmap, caches.atlas, consts)  # compile / warm caches
        t = time.perf_counter()
        res = oc.classify_batch(zs, n, caches.fmap, caches.atlas, consts)
        ms = (time.perf_counter() - t) * 1000
        z = complex(zs[0])
        m = deepest_level(caches.atlas, z)
        count, measured = naive_first_return(caches.fmap, caches.atlas, z, m)
        exhausted = int((res.status == oc.STATUS_EXHAUSTED).sum())
        rows.append([n, int(res.steps.max()), f"{ms:.3f}", count, "measured" if measured else "extrapolated",
                     m, probes, exhausted])
    return rows


def quadratic_fit_r2(xs, ys) -> float:
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    coef = np.polyfit(xs, ys, 2)
    resid = ys - np.polyval(coef, xs)
    tot = float(((ys - ys.mean()) ** 2).sum())
    return 1.0 if tot == 0 else 1.0 - float((resid ** 2).sum()) / tot


# -- command line ------------------------------------------------------------

def _set_threads(k: int | None) -> int:
    import numba

    top = numba.config.NUMBA_NUM_THREADS
    k = top if k is None else max(1, min(int(k), top))
    numba.set_num_threads(k)
    return k


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--cache-dir", help="cache directory (default: $FEIGENJET_CACHE_DIR or ./.feigenjet-cache)")
    common.add_argument("--config", help="key = value file overriding the built-in constants")
    common.add_argument("--threads", type=int, help="worker threads (clamped to the available count)")
    common.add_argument("--out", help="output path")

    p = argparse.ArgumentParser(prog="feigenjet", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", parents=[common], help="solve the fixed-point equation and cache F")
    s.add_argument("--degree", type=int, help="series degree N")
    s.add_argument("--bits", type=int, help="working precision in bits")
    sub.add_parser("atlas", parents=[common], help="build and cache the region atlas")
    for name, hlp in (("render", "bilevel Julia set frame (PGM)"), ("tiles", "tile colouring raster (PGM)"),
                      ("verify", "compare a frame with the reference oracle (CSV)")):
        q = sub.add_parser(name, parents=[common], help=hlp)
        q.add_argument("--n", type=int, required=True, help="precision parameter")
        q.add_argument("--window", default=DEFAULT_WINDOW, help="dyadic x0,y0,x1,y1")
        if name == "verify":
            q.add_argument("--image", help="verify this PGM instead of rendering")
    b = sub.add_parser("bench", parents=[common], help="step counts and timings against n (CSV)")
    b.add_argument("--ns", default=",".join(map(str, DEFAULT_BENCH_NS)))
    b.add_argument("--probes", type=int, default=64)
    return p


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _dispatch(args)
    except MissingCache as exc:
        print(f"feigenjet: missing cache: {exc}", file=sys.stderr)
        return EXIT_MISSING_CACHE
    except InvalidWindow as exc:
        print(f"feigenjet: invalid window: {exc}", file=sys.stderr)
        return EXIT_INVALID_WINDOW
    except PrecisionExhausted as exc:
        print(f"feigenjet: precision exhausted: {exc}", file=sys.stderr)
        return EXIT_PRECISION
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"feigenjet: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def _dispatch(args) -> int:
    cfg = load_config(args.config)
    _set_threads(args.threads)
    cache_dir = resolve_cache_dir(args.cache_dir)
    if args.command == "solve":
        scfg = SolverConfig(degree=args.degree or int(cfg["degree"]),
                            precision_bits=args.bits or int(cfg["precision_bits"]))
        fmap = solve_fixed_point(scfg)
        cache_dir.mkdir(parents=True, exist_ok=True)
        save_map(fmap, Path(args.out) if args.out else cache_dir / MAP_FILE)
        print(f"lambda = {float(fmap.lam):.15f}  1/lambda = {1 / float(fmap.lam):.10f}")
        return EXIT_OK
    if args.command == "atlas":
        mp = cache_dir / MAP_FILE
        if not mp.exists():
            raise MissingCache(f"{mp} not found; run `feigenjet solve` first")
        atlas = ra.build_atlas(load_map(mp))
        ra.save_atlas(atlas, Path(args.out) if args.out else cache_dir / ATLAS_FILE)
        print(f"delta = {atlas.delta}  U3 squares = {len(atlas.U3)}")
        return EXIT_OK
    consts = constants_from_config(cfg)
    caches = load_caches(cache_dir)
    if args.command == "bench":
        ns = [int(v) for v in args.ns.split(",")]
        rows = bench(ns, caches, consts, args.probes)
        text = write_csv(args.out, BENCH_HEADER, rows)
        if not args.out:
            sys.stdout.write(text)
        return EXIT_OK
    window = Window.parse(args.window)
    job = RenderJob(args.n, window, {"render": "julia"}.get(args.command, args.command),
                    Path(args.out) if args.out else None, consts, pixel_mode=cfg.get("pixel_mode", "adaptive"))
    if job.mode == "tiles":
        img = _TILE_GREY[render_tiles(job.n, window, caches.fmap)]
        _require_out(job)
        write_pgm(job.output_path, img)
        return EXIT_OK
    if job.mode == "julia":
        _require_out(job)
        write_pgm(job.output_path, bilevel_to_pgm(render_frame(job.n, window, caches, consts, job.pixel_mode)))
        return EXIT_OK
    # verify
    if args.image:
        image = read_pgm(args.image) == 0
    else:
        image = render_frame(job.n, window, caches, consts, job.pixel_mode)
    oracle = reference_for_window(job.n, window, caches)
    if image.shape != oracle.shape:
        raise InvalidWindow(f"image shape {image.shape} does not match the window {oracle.shape}")
    rep = verify_report(image, oracle)
    text = write_csv(job.output_path, ["key", "value"], [[k, v] for k, v in rep.items()])
    if job.output_path is None:
        sys.stdout.write(text)
    return EXIT_OK if rep["contradictions"] == 0 else EXIT_ERROR


def _require_out(job: RenderJob) -> None:
    if job.output_path is None:
        raise ValueError("--out is required")


def main() -> None:
    import warnings

    from numba.core.errors import NumbaWarning

    # an old system TBB only means numba falls back to another threading layer
    warnings.filterwarnings("ignore", message=".*TBB.*", category=NumbaWarning)
    sys.exit(run())


__all__ = [
    "BENCH_HEADER", "Caches", "InvalidWindow", "MissingCache", "PrecisionExhausted", "RenderJob", "SelfSimReport",
    "Window", "WindowTooSmall", "bench", "bench_probes", "build_reference", "constants_from_config",
    "load_caches", "load_config", "main", "naive_first_return", "quadratic_fit_r2", "read_pgm", "render_frame",
    "render_tiles", "resolve_cache_dir", "run", "selfsim_check", "verify_report", "write_csv", "write_pgm",
]
