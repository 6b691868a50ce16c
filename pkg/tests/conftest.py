import numpy as np
import pytest
from hypothesis import settings

from xdomainmix import _pykernels, kernels

settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")

BACKENDS = [pytest.param(_pykernels, id="python")]
if kernels.compiled_module() is not None:
    BACKENDS.append(pytest.param(kernels.compiled_module(), id="compiled"))


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for n in sorted(REPORT):
            terminalreporter.write_line(REPORT[n])
