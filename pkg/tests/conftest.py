"""Shared fixtures; solved germs are cached per session because they are slow."""
import functools
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from hypgerm.germ import disk_germ, fuchsian_germ, solve_germ  # noqa: E402

ACCEPTANCE_RESULTS = {}


@functools.lru_cache(maxsize=None)
def cached_fuchsian(level):
    return fuchsian_germ(level)


@functools.lru_cache(maxsize=None)
def cached_solved(level, amp=0.1, seed=7):
    return solve_germ(level, seed=seed, amp=amp)


@functools.lru_cache(maxsize=None)
def cached_disk():
    return disk_germ()


@pytest.fixture(scope="session")
def fuchsian():
    return cached_fuchsian


@pytest.fixture(scope="session")
def solved():
    return cached_solved


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{key:>4} {'PASS' if ok else 'FAIL'}  {detail}")
