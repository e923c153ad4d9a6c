import os

import pytest
from hypothesis import HealthCheck, settings

from smcguard.execmem import is_x86_64

settings.register_profile("default", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=50)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def _rwx_ok() -> bool:
    if not is_x86_64():
        return False
    try:
        from smcguard.execmem import alloc_exec
        alloc_exec(1).release()
        return True
    except Exception:
        return False


NATIVE_OK = _rwx_ok()
native = pytest.mark.skipif(not NATIVE_OK, reason="needs x86-64 with RWX pages")


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(12345)


# one line per acceptance criterion, collected by test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
