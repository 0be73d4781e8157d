"""Shared solver runs; each preset is solved once per session."""
from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest

from thinfb.config import RunConfig
from thinfb.presets import build
from thinfb.solver import ScalarField, solve

ACCEPTANCE_LINES: list = []


def solved(preset: str, *overrides: str):
    cfg = RunConfig.resolve(None, preset, list(overrides))
    pr = build(cfg)
    U = solve(pr.problem, cfg.solver)
    return ScalarField(U.grid, U.w, U.values, U.provenance, pr.problem.source, pr.obstacle, U.meta), pr


_CACHE: dict = {}


def cached(preset: str, *overrides: str):
    key = (preset,) + overrides
    if key not in _CACHE:
        _CACHE[key] = solved(preset, *overrides)
    return _CACHE[key]


@pytest.fixture(scope="session")
def p2_run():
    return cached("p2-singular")


@pytest.fixture(scope="session", params=[Fraction(-2, 5), Fraction(0), Fraction(1, 2)], ids=["a=-0.4", "a=0", "a=0.5"])
def p2_run_a(request):
    return cached("p2-singular", f"run.a={request.param}")


@pytest.fixture(scope="session")
def timelike_run():
    return cached("time-like")


@pytest.fixture(scope="session")
def regular_run():
    return cached("regular-a0")


@pytest.fixture(scope="session")
def sine_run():
    return cached("sine-obstacle")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda ln: int(ln.split()[0][2:])):
            terminalreporter.write_line(line)


def report(n: int, ok: bool, detail: str) -> bool:
    """Record and print one acceptance line."""
    line = f"AC{n} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def max_error(U, exact) -> float:
    X, Y = U.grid.bulk_points()
    return max(float(np.max(np.abs(U.values[m] - exact(X, Y, tm)))) for m, tm in enumerate(U.grid.t))
