from __future__ import annotations

import functools
import math

import numpy as np
import pytest

from eprb.dataset import StationDataset
from eprb.simulator import SimulationConfig, run_simulation

_ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, label: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {label} :: {detail}"
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_ds(tags, station=1, settings=None, outcomes=None, base=0.0):
    tags = np.asarray(tags, dtype=np.int64)
    n = tags.size
    return StationDataset(
        station_id=station,
        time_tags=tags,
        settings=np.zeros(n, np.uint8) if settings is None else np.asarray(settings, np.uint8),
        outcomes=np.ones(n, np.int8) if outcomes is None else np.asarray(outcomes, np.int8),
        base_angle=base,
    )


def brute_force_max_matching(t1, t2, window) -> int:
    """Exact maximum matching size by exhaustive search with memoization.

    Station-2 events that can no longer reach any later station-1 event are
    dropped from the memo key, which keeps the state space small.
    """
    t1 = sorted(int(t) for t in t1)
    t2 = [int(t) for t in t2]

    @functools.lru_cache(maxsize=None)
    def best(i: int, used: frozenset) -> int:
        if i == len(t1):
            return 0
        keep = frozenset(u for u in used if t2[u] >= t1[i] - window)
        if keep != used:
            return best(i, keep)
        result = best(i + 1, used)
        for m, t in enumerate(t2):
            if m not in used and abs(t1[i] - t) <= window:
                result = max(result, 1 + best(i + 1, used | {m}))
        return result

    return best(0, frozenset())


@pytest.fixture(scope="session")
def small_sim():
    return run_simulation(SimulationConfig(pairs=20_000, seed=7))


@pytest.fixture(scope="session")
def sim_1e6():
    """Default-configuration datasets for both time-tag models, 10^6 pairs."""
    out = {}
    for model in ("uniform", "exponential"):
        out[model] = run_simulation(SimulationConfig(pairs=1_000_000, time_tag_model=model))
    return out


def close(a, b, tol=1e-12):
    return math.isclose(a, b, abs_tol=tol)


def _polarizer(theta):
    c, s = math.cos(2 * theta), math.sin(2 * theta)
    return np.array([[c, s], [s, -c]])


def random_physical_draw(rng: np.random.Generator, r_max: float = 0.5):
    """Relative efficiencies and a state table from a random two-photon density matrix."""
    from eprb.efficiency import EfficiencyParams, StateTable
    from eprb.simulator import BELL_ANGLES

    g = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    rho = g @ g.conj().T
    rho /= np.trace(rho).real
    a = BELL_ANGLES[:2]
    b = BELL_ANGLES[2:]
    eye = np.eye(2)

    def ev(op):
        return float(np.trace(rho @ op).real)

    e1 = tuple(ev(np.kron(_polarizer(x), eye)) for x in a)
    e2 = tuple(ev(np.kron(eye, _polarizer(y))) for y in b)
    e = tuple(tuple(ev(np.kron(_polarizer(x), _polarizer(y))) for y in b) for x in a)
    r1, r2 = rng.uniform(-r_max, r_max, 2)
    return EfficiencyParams(float(r1), float(r2)), StateTable(e1, e2, e)


REFERENCE_ROW = dict(r1=0.17, r2=-0.01, e1=(-0.17, -0.23), e2=(0.11, -0.13), e=((-0.72, 0.47), (-0.52, None)))
