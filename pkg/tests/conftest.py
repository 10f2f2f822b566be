import numpy as np
import pytest

from semaforge import kernels


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile the jit kernels once so timings in tests are steady-state."""
    kernels.warmup()


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
