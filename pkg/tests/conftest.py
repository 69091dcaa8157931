import numpy as np
import pytest

from postcouple import Dataset


def pytest_configure(config):
    config._criteria_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria_lines", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)


@pytest.fixture
def report_criterion(request):
    """Record one PASS/FAIL line for the terminal summary, then assert."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config._criteria_lines.append(line)
        print(line)
        assert passed, line

    return record


@pytest.fixture
def small_dataset():
    rng = np.random.default_rng(7)
    n = 120
    x = rng.standard_normal((n, 2))
    a = (rng.uniform(size=n) < 1 / (1 + np.exp(-0.5 * x[:, 0]))).astype(float)
    y = 1.0 + 2.0 * a + x @ np.array([1.0, -0.5]) + rng.standard_normal(n)
    return Dataset(y=y, a=a, x=x, column_names=("x1", "x2"))
