"""Shared fixtures and the per-criterion acceptance summary."""

from __future__ import annotations

import numpy as np
import pytest

from bohmsim.grid import AxisSpec, Grid, WaveFunction, normalize
from bohmsim.states import gaussian

N_CRITERIA = 10
_verdicts: dict[int, list[tuple[bool, str]]] = {}


class CriterionLog:
    """Collects pass/fail lines for the numbered acceptance criteria."""

    def record(self, number: int, passed: bool, detail: str) -> bool:
        _verdicts.setdefault(number, []).append((bool(passed), detail))
        return bool(passed)


@pytest.fixture(scope="session")
def criteria() -> CriterionLog:
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        checks = _verdicts.get(n)
        if not checks:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL (not evaluated)")
            continue
        ok = all(p for p, _ in checks)
        detail = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def ring() -> Grid:
    return Grid((AxisSpec(256, -20.0, 20.0),))


@pytest.fixture
def gauss(ring) -> WaveFunction:
    return normalize(WaveFunction(ring, gaussian(ring.coords(0), 0.5, 1.0, 0.8)))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
