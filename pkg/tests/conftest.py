import numpy as np
import pytest

from rigfit.synth import ToyRigConfig, make_toy_rig


@pytest.fixture(scope="session")
def toy_rig():
    return make_toy_rig(ToyRigConfig())


@pytest.fixture(scope="session")
def small_rig():
    """Few joints; cheap enough for gradient checks."""
    return make_toy_rig(ToyRigConfig(joints=5, expressions=2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
