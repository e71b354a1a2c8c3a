from __future__ import annotations

import numpy as np
import pytest

from flowharnack import geometry as geo
from flowharnack import pipeline, presets

# criterion number -> (passed, one-line detail), filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def ricci_ctx():
    return pipeline.RunContext(presets.preset("ricci-perturbed"))


@pytest.fixture(scope="session")
def extended_ctx():
    return pipeline.RunContext(presets.preset("extended-ricci"))


@pytest.fixture(scope="session")
def flat_ctx():
    return pipeline.RunContext(presets.preset("flat-static"))


@pytest.fixture(scope="session")
def negative_ctx():
    return pipeline.RunContext(presets.preset("negative-control"))


def wavy_metric(n=32, amp=0.2, scheme="spectral"):
    chart = geo.GridChart(n, n, scheme=scheme)
    X, Y = chart.mesh
    return geo.ConformalMetric(chart, amp * np.cos(X) * np.sin(2 * Y) + 0.5 * amp * np.sin(X + Y))
