import math

import numpy as np
import pytest

from robustci import precoder
from robustci.model import UserScenario, make_constellation


def qpsk_single_user(gamma_hat=1.0, err_var=0.0, p_hat=0.0):
    user = UserScenario(np.array([1.0 + 0j]), 1.0 + 0j, 1.0, gamma_hat, p_hat, err_var)
    return precoder.Scenario((user,), make_constellation(4))


def random_scenario(rng, m=4, n=4, mod_order=8, gamma_hat=1.0, p_hat=0.9, err_var=0.02,
                    sigma_z=1.0):
    const = make_constellation(mod_order)
    h = (rng.standard_normal((n, m)) + 1j * rng.standard_normal((n, m))) / math.sqrt(2)
    d = const.symbols[rng.integers(0, mod_order, n)]
    users = tuple(UserScenario(h[i], d[i], sigma_z, gamma_hat, p_hat, err_var) for i in range(n))
    return precoder.Scenario(users, const)


def feasible_scenarios(seed, count, **kw):
    """First ``count`` random scenarios whose sphere-bounding problem is feasible."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        sc = random_scenario(rng, **kw)
        res = precoder.solve_sphere_bounding(sc)
        if res.optimal:
            out.append((sc, res))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, passed: bool, detail: str) -> None:
    """Print one verdict line and keep it for the terminal summary."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
