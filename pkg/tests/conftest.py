import zlib

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from couinseg import kernels

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

BACKENDS = kernels.backends()


@pytest.fixture(params=sorted(BACKENDS))
def kmod(request):
    """A kernel backend module (compiled and/or python)."""
    return BACKENDS[request.param]


@pytest.fixture(params=sorted(BACKENDS))
def backend(request, monkeypatch):
    """Route every kernel call in the package through one backend."""
    mod = BACKENDS[request.param]
    for name in kernels.NAMES:
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    return request.param


@pytest.fixture
def rng(request):
    return np.random.default_rng(zlib.crc32(request.node.name.encode()))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in mod.RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
