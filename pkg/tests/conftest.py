import os

import pytest
from hypothesis import HealthCheck, settings

from remotemem import _kernels

settings.register_profile(
    "default", deadline=None, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large,
                           HealthCheck.large_base_example],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# criterion number -> (name, passed, detail); filled by test_acceptance
ACCEPTANCE = {}


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # first call of each jitted kernel compiles; keep that out of timed tests
    import numpy as np
    page = np.zeros(_kernels.PAGE_SIZE, dtype=np.uint8)
    _kernels.add_fill(page, 1, 0)
    _kernels.fill_page(1, 0)
    _kernels.is_zero(page.view(np.uint64))
    _kernels.presence_sim(np.zeros(1, dtype=np.int64), 1, 1, False)


@pytest.fixture
def acceptance():
    def record(number, name, passed, detail=""):
        ACCEPTANCE[number] = (name, passed, detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        verdict = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        terminalreporter.write_line(f"criterion {number:>2} {verdict}  {name}  {detail}")
