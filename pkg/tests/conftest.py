import os

import pytest
from hypothesis import HealthCheck, settings

from fodkit import _kernels

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

KERNEL_BACKENDS = ["python"] + (["cython"] if _kernels.BACKEND == "cython" else [])
_RESULTS = {}


@pytest.fixture(params=KERNEL_BACKENDS)
def kernels(request):
    """Kernel module for each available backend."""
    if request.param == "python":
        return _kernels._pykernels
    from fodkit._kernels import _ckernels
    return _ckernels


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    n, title = mark.args
    prev = _RESULTS.get(n, (title, True))
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    _RESULTS[n] = (title, prev[1] and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}")
