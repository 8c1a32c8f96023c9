"""Shared fixtures.

The coefficient and atlas caches are built once through the command line
(``feigenjet solve`` then ``feigenjet atlas``) into a directory that is kept
between runs: $FEIGENJET_TEST_CACHE, or .feigenjet-cache at the repository
root.  Existing caches are revalidated on load.
"""
import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

from feigenjet import render_cli as cli

ROOT = Path(__file__).resolve().parents[1]
BUILD_TIMES = {}


def _cli(*args, env=None):
    return subprocess.run([sys.executable, "-m", "feigenjet", *args], capture_output=True, text=True,
                          env=env, timeout=3600)


@pytest.fixture(scope="session")
def cache_dir():
    d = Path(os.environ.get("FEIGENJET_TEST_CACHE", ROOT / ".feigenjet-cache"))
    d.mkdir(parents=True, exist_ok=True)
    for cmd, name in (("solve", cli.MAP_FILE), ("atlas", cli.ATLAS_FILE)):
        if not (d / name).exists():
            t = time.perf_counter()
            r = _cli(cmd, "--cache-dir", str(d))
            assert r.returncode == 0, r.stderr
            BUILD_TIMES[cmd] = time.perf_counter() - t
    return d


@pytest.fixture(scope="session")
def caches(cache_dir):
    return cli.load_caches(cache_dir)


@pytest.fixture(scope="session")
def fmap(caches):
    return caches.fmap


@pytest.fixture(scope="session")
def atlas(caches):
    return caches.atlas


@pytest.fixture(scope="session")
def consts():
    return cli.constants_from_config(cli.load_config())


@pytest.fixture(scope="session")
def run_cli(cache_dir):
    def run(*args):
        env = dict(os.environ, FEIGENJET_CACHE_DIR=str(cache_dir))
        return _cli(*args, env=env)
    return run


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        terminalreporter.write_line(results[k])
    if BUILD_TIMES:
        terminalreporter.write_line("cache build: " + ", ".join(f"{k} {v:.0f} s" for k, v in BUILD_TIMES.items()))
