import os

import numpy as np
import pytest

from mirmodel.simlab import SimConfig, gen_setting1

FIXTURE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures", "small")


def make_data(n=20, T=10, d=2, lam=None, seed=1, density=None, error_dist="normal"):
    cfg = SimConfig(n=n, T=T, d=d, lambda_true=lam, base_seed=seed, density=density,
                    error_dist=error_dist, replications=1)
    return gen_setting1(cfg, 0)


@pytest.fixture
def small_data():
    return make_data()


@pytest.fixture
def fixture_dir():
    return FIXTURE_DIR


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


#: One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
