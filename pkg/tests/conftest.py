import math

import numpy as np
import pytest

from liquidex.model import (GbmProvider, ImpactSpec, LinearImpact, ProblemSpec, RegimeGbmParams, identity_block,
                            base_problem, validate_generator)
from liquidex.solver import solve

BASE_Q = [[-0.5, 0.5], [1.0, -1.0]]


def oracle_a_spec(**kw):
    base = dict(model=GbmProvider(RegimeGbmParams((0.3,), (0.2,))), generator=validate_generator([[0.0]]),
                impact=ImpactSpec(LinearImpact(), identity_block()))
    base.update(kw)
    return ProblemSpec(**base)


@pytest.fixture(scope="session")
def base_spec():
    return base_problem()


@pytest.fixture(scope="session")
def base_solution(base_spec):
    return solve(base_spec, store_steps="all")


@pytest.fixture(scope="session")
def linear_base_solution():
    return solve(base_problem(impact=ImpactSpec(LinearImpact(), base_problem().impact.g)), store_steps="all")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def e(x):
    return math.exp(x)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
