import numpy as np
import pytest
from hypothesis import settings

from imclmap.model import AcquisitionConfig, FieldConstants

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

# acceptance outcomes, filled by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def field():
    return FieldConstants()


@pytest.fixture
def time_axis():
    return np.arange(1024) * 0.5e-3


@pytest.fixture
def cfg32():
    return AcquisitionConfig(grid_n=32)


@pytest.fixture
def cfg16():
    return AcquisitionConfig(grid_n=16, n_spectral_points=128)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {k}. {line}")
