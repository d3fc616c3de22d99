import numpy as np
import pytest
from scipy.optimize import linprog

from ramplight.control import RampSpec


def lp_optimum(s, u0, r):
    """Reference LP: min sum e_t, e_t >= |u_t - s_t|, |u_t - u_{t-1}| <= r, u >= 0."""
    s = np.asarray(s, dtype=float)
    T = len(s)
    rows, rhs = [], []

    def row(pairs):
        e = np.zeros(2 * T)
        for i, v in pairs:
            e[i] = v
        return e

    for t in range(T):
        rows.append(row([(t, 1), (T + t, -1)])); rhs.append(s[t])
        rows.append(row([(t, -1), (T + t, -1)])); rhs.append(-s[t])
        if t == 0:
            rows.append(row([(0, 1)])); rhs.append(u0 + r)
            rows.append(row([(0, -1)])); rhs.append(r - u0)
        else:
            rows.append(row([(t, 1), (t - 1, -1)])); rhs.append(r)
            rows.append(row([(t, -1), (t - 1, 1)])); rhs.append(r)
    c = np.r_[np.zeros(T), np.ones(T)]
    res = linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=[(0, None)] * (2 * T), method="highs")
    assert res.status == 0
    return res.fun


def random_episode(rng, T):
    base = rng.uniform(50, 800)
    steps = rng.normal(0, 12, T)
    jumps = rng.random(T) < 0.05
    steps[jumps] += rng.normal(0, 150, jumps.sum())
    return np.maximum(base + np.cumsum(steps), 0.0)


@pytest.fixture
def nominal_ramp():
    return RampSpec(2.0 / 3.0, 7.0)


@pytest.fixture
def unit_ramp():
    return RampSpec(2.0 / 3.0, 1.0)


# one line per acceptance criterion, filled in by test_acceptance and echoed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
