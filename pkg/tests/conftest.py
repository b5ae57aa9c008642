import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qsi import kernels
from qsi.model import Detector, Emitter, ScanGrid, Scene

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("QSI_HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    prev = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)


def pair_scene(d_nm=366.1, a=18000.0, b=9000.0, **det):
    return Scene((Emitter(-d_nm / 2, 0.0, a), Emitter(d_nm / 2, 0.0, b)), detector=Detector(**det))


def scan_grid(dwell_s=1.0, n=40, pitch=30.0):
    x0 = -0.5 * (n - 1) * pitch
    return ScanGrid(x0, x0, pitch, n, n, dwell_s)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.abs(b), 1e-300)


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
