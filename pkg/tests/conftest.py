import re

import numpy as np
import pytest


def pytest_addoption(parser):
    parser.addoption(
        "--run-extended",
        action="store_true",
        default=False,
        help="run hours-long full-scale reproduction tests",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-extended"):
        return
    skip = pytest.mark.skip(reason="extended test; pass --run-extended to run")
    for item in items:
        if "extended" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria outcomes, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_runtest_logreport(report):
    # criteria skipped before their body runs still get a line
    m = re.search(r"test_acceptance\.py::test_c(\d+)_", report.nodeid)
    if m and report.skipped and int(m.group(1)) not in ACCEPTANCE:
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
        ACCEPTANCE[int(m.group(1))] = f"criterion {int(m.group(1)):2d}: NOT RUN - {reason.removeprefix('Skipped: ')}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
