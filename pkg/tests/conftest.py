import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tdnns_piezo import material as mat
from tdnns_piezo import mesh as msh

settings.register_profile(
    "default", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def pzt5_2d():
    return mat.reduce_to_plane(mat.pzt5())


@pytest.fixture(scope="session")
def sonox_2d():
    return mat.reduce_to_plane(mat.sonox_p502())


@pytest.fixture(scope="session")
def beam():
    return msh.structured_beam_mesh(0.1, [5e-4, 5e-4], 16, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
