"""Shared toy models. Built once per session because every new model compiles."""
import numpy as np
import pytest

from swddc.benchmarks import LqSpec, lq_case1_spec, lq_model
from swddc.sde import ControlledModel


def _zero_model():
    def drift(t, x, u, a):
        return np.zeros(1)

    def drift_dx(t, x, u, a):
        return np.zeros((1, 1))

    def drift_du(t, x, u, a):
        return np.zeros((1, 1))

    def diffusion(t):
        return np.zeros((1, 1))

    def zero_cost(t, x, u):
        return 0.0

    def zero_dx(t, x, u):
        return np.zeros(1)

    def zero_du(t, x, u):
        return np.zeros(1)

    def term_cost(x):
        return x[0]

    def term_cost_dx(x):
        return np.ones(1)

    return ControlledModel(1, 1, 1, drift, drift_dx, drift_du, diffusion,
                           zero_cost, zero_dx, zero_du, term_cost, term_cost_dx, name="null")


@pytest.fixture(scope="session")
def null_model():
    """b = 0, sigma = 0, f = 0, h(x) = x: every gradient vanishes."""
    return _zero_model()


@pytest.fixture(scope="session")
def case1_spec():
    return lq_case1_spec()


@pytest.fixture(scope="session")
def case1(case1_spec):
    return lq_model(case1_spec)


def lq1(a=1.0, b=0.5, c=0.01, q=1.0, r=0.1, f=1.0):
    """Scalar LQ spec with A = a * alpha."""
    return LqSpec(A0=[[a]], B=[[b]], C=[[c]], Q=[[q]], R=[[r]], F=[[f]])


@pytest.fixture(scope="session")
def case1_quiet():
    """Case-1 coefficients with diffusion 1e-6."""
    return lq_model(lq1(c=1e-6))


ACCEPTANCE_LINES: list = []


def report(criterion: str, passed: bool, detail: str) -> bool:
    """Print and remember one acceptance line; returns ``passed`` for the assert."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
