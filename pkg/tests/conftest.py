import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from apdg.kinetic import FieldPreset, ProblemData, assemble, make_phase_space  # noqa: E402
from apdg.maxwellian import build_root_maxwellian  # noqa: E402

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def generic_data():
    """Variable collision frequency and a field that changes sign."""
    return ProblemData(theta=1.0, omega=FieldPreset("linear", 1.0, 0.5),
                       E=FieldPreset("sinusoid", 0.2, 0.3, 2.0),
                       rho0=FieldPreset("sinusoid", 0.0, 1.0, 1.0))


@pytest.fixture(scope="session")
def small_setup(generic_data):
    spaces = make_phase_space((0.0, 1.0), 4, 1, 3.0, 4, 1)
    M = build_root_maxwellian(spaces.v.mesh, 1.0)
    return generic_data, spaces, M


@pytest.fixture(scope="session")
def small_ops(small_setup):
    data, spaces, M = small_setup
    return {beta: assemble(spaces, M, data, beta, 0.1) for beta in (0, 1)}
