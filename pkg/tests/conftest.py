import numpy as np
import pytest

from sepmodel.initiation import NegBinomParams
from sepmodel.phase_type import CoxianParams

# featureless estimates used throughout as a realistic operating point
FEATURELESS = CoxianParams([0.8194, 0.1806], [0.0520, 0.0030], 0.0981)
INITIATION = NegBinomParams(3, 0.59725)


def random_coxian(rng, n=None, min_ratio=1.15, exit_p=None):
    """Random feasible Coxian parameters with well-separated rates."""
    n = int(rng.integers(1, 4)) if n is None else n
    top = 10 ** rng.uniform(-2.5, 0.0)
    ratios = rng.uniform(min_ratio, 20.0, n - 1)
    gamma = top / np.concatenate(([1.0], np.cumprod(ratios)))
    beta = rng.dirichlet(np.ones(n))
    return CoxianParams(beta, gamma, exit_p)


@pytest.fixture
def featureless():
    return FEATURELESS


@pytest.fixture
def initiation():
    return INITIATION


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, echoed live and repeated in the terminal summary
ACCEPTANCE = []


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
    ACCEPTANCE.append((number, line))
    print("\n" + line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
