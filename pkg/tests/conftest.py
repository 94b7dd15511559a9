import numpy as np
import pytest
from hypothesis import settings

from qspace.sph_core import sh_indices

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def random_real_coeffs(L, rng, size=None):
    """Coefficients of a random real antipodal signal (conjugate symmetric)."""
    ell, m = sh_indices(L)
    shape = (len(ell),) if size is None else (len(ell), size)
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    idx = {(l, mm): i for i, (l, mm) in enumerate(zip(ell, m))}
    for i, (l, mm) in enumerate(zip(ell, m)):
        if mm == 0:
            c[i] = c[i].real
        elif mm < 0:
            c[i] = (-1.0) ** int(mm) * np.conj(c[idx[(l, -mm)]])
    return c


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_CRITERIA = {}


@pytest.fixture(scope="session")
def criteria():
    """Collector for acceptance lines, printed in the terminal summary."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[key])
