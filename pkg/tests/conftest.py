import time

import pytest

from dmlhedge.cli import run_table1
from dmlhedge.pipeline import RunConfig

CRITERIA: list[str] = []


def record(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} | {detail}"
    CRITERIA.append(line)
    print(line)


@pytest.fixture(scope="session")
def grid():
    """The default table1 grid (5 seeds x 4 sizes), trained once per session."""
    t0 = time.perf_counter()
    res, curves = run_table1(RunConfig())
    return res, curves, time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA):
            terminalreporter.write_line(line)
