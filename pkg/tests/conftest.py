import numpy as np
import pytest

from smdpbatch.profile import ServiceProfile, Weights, Workload, load_profile


@pytest.fixture(scope="session")
def p4():
    return load_profile("googlenet-p4")


@pytest.fixture
def unit_profile():
    # tau[b] = b, zeta[b] = b
    return ServiceProfile(alpha=1.0, tau0=0.0, beta=1.0, zeta0=0.0, b_max=4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_profile(b_max=1):
    return ServiceProfile(alpha=0.5, tau0=0.4, beta=2.0, zeta0=1.0, b_max=b_max)


def tiny_setup(b_max=1, rho=0.6, w1=1.0, w2=0.5):
    profile = tiny_profile(b_max)
    return profile, Workload.from_rho(profile, rho), Weights(w1, w2)


ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance():
    """Record the one-line verdict of an acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
