import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from liquidex.model import validate_generator
from liquidex.solver import solve
from liquidex.verify import (Check, applicable_oracles, closed_form_hold_value, constant_rate_value,
                             coupled_ode_value, hold_factors, oracle_self_checks, solver_checks)
from liquidex.config import load_config
from liquidex.cli import resolve_config_path

from .conftest import BASE_Q, oracle_a_spec

ident = lambda x: x  # noqa: E731


class TestHoldValue:
    def test_example(self):
        assert closed_form_hold_value(10, 1, 0, 0.3, 0.01, 1) == pytest.approx(13.3643, abs=1e-4)
        assert closed_form_hold_value(10, 1, 0, 0.3, 0.01, 1) == 10 * math.exp(0.29)

    def test_no_growth(self):
        assert closed_form_hold_value(7, 3, 0.2, 0.05, 0.05, 1) == 21

    def test_empty(self):
        assert closed_form_hold_value(0, 3, 0, 0.3, 0.01, 1) == 0


class TestConstantRate:
    def test_liquidates_before_horizon(self):
        v = constant_rate_value(100, 1, 100, 0.3, 0.01, 1, ident)
        assert v == pytest.approx(100 * math.expm1(0.29) / 0.29, rel=1e-14)
        assert v == pytest.approx(116.0095, abs=1e-4)

    def test_value_conserved_without_drift(self):
        assert constant_rate_value(100, 2, 30, 0.0, 0.0, 1, ident) == pytest.approx(200, rel=1e-14)

    def test_empty(self):
        assert constant_rate_value(0, 1, 10, 0.3, 0.01, 1, ident) == 0

    def test_same_growth_and_discount(self):
        # mu == beta uses the N s theta limit
        assert constant_rate_value(100, 1, 50, 0.05, 0.05, 1, ident) == pytest.approx(50 + 50, rel=1e-14)

    def test_tiny_rate_approaches_holding(self):
        x, T = 80.0, 1.0
        v = constant_rate_value(x, 1.5, 1e-6 * x / T, 0.3, 0.01, T, ident)
        assert v == pytest.approx(closed_form_hold_value(x, 1.5, 0, 0.3, 0.01, T), rel=1e-3)

    def test_lower_bound_when_decaying(self):
        # mu < beta: V >= J(constant rate) for any rate, and selling beats holding
        hold = closed_form_hold_value(50, 1, 0, 0.0, 0.1, 1)
        assert constant_rate_value(50, 1, 100, 0.0, 0.1, 1, ident) > hold


@given(x=st.floats(0.1, 100), s=st.floats(0.1, 10), n=st.floats(1, 200), dx=st.floats(0.01, 10),
       ds=st.floats(0.01, 5))
@settings(max_examples=300, deadline=None)
def test_oracles_increasing(x, s, n, dx, ds):
    assert closed_form_hold_value(x + dx, s, 0, 0.3, 0.01, 1) > closed_form_hold_value(x, s, 0, 0.3, 0.01, 1)
    assert closed_form_hold_value(x, s + ds, 0, 0.3, 0.01, 1) > closed_form_hold_value(x, s, 0, 0.3, 0.01, 1)
    assert constant_rate_value(x + dx, s, n, 0.3, 0.01, 1, ident) > constant_rate_value(x, s, n, 0.3, 0.01, 1, ident)
    assert constant_rate_value(x, s + ds, n, 0.3, 0.01, 1, ident) > constant_rate_value(x, s, n, 0.3, 0.01, 1, ident)


class TestCoupledOde:
    def test_matches_matrix_exponential(self):
        gen = validate_generator(BASE_Q)
        for t in (0.0, 0.4, 0.9):
            exact = expm((np.diag([0.29, -0.11]) + gen.q) * (1 - t)) @ np.ones(2)
            np.testing.assert_allclose(hold_factors(t, gen, [0.3, -0.1], 0.01, 1.0), exact, rtol=1e-12)

    def test_decoupled(self):
        gen = validate_generator([[0.0, 0.0], [0.0, 0.0]])
        for ell, mu in enumerate((0.3, -0.1)):
            assert coupled_ode_value(10, 2, 0.0, ell, gen, [0.3, -0.1], 0.01, 1) == pytest.approx(
                closed_form_hold_value(10, 2, 0, mu, 0.01, 1), rel=1e-12)

    def test_symmetric_regimes(self):
        f = hold_factors(0.25, validate_generator(BASE_Q), [0.2, 0.2], 0.01, 1.0)
        np.testing.assert_allclose(f, math.exp(0.19 * 0.75), rtol=1e-12)

    def test_coupling_pulls_values_together(self):
        gen = validate_generator(BASE_Q)
        f = hold_factors(0.0, gen, [0.3, -0.1], 0.01, 1.0)
        assert math.exp(-0.11) < f[1] < f[0] < math.exp(0.29)

    def test_increasing_in_state(self):
        gen = validate_generator(BASE_Q)
        args = (gen, [0.3, -0.1], 0.01, 1.0)
        assert coupled_ode_value(11, 1, 0, 0, *args) > coupled_ode_value(10, 1, 0, 0, *args)
        assert coupled_ode_value(10, 1.1, 0, 1, *args) > coupled_ode_value(10, 1, 0, 1, *args)


def test_self_checks_pass():
    checks = oracle_self_checks()
    assert len(checks) == 5
    for c in checks:
        assert c.passed, c.line()


def test_check_line():
    assert Check("a", 1.0, 1.0, 0.1).line().startswith("PASS")
    failing = Check("b", 2.0, 1.0, 0.1)
    assert not failing.passed and failing.line().startswith("FAIL") and failing.error == 1.0


def test_applicable_oracles(base_spec):
    assert applicable_oracles(base_spec) == []
    assert applicable_oracles(oracle_a_spec()) == ["hold-value"]
    assert applicable_oracles(oracle_a_spec(upsilon_max=0.0)) == ["hold-value", "coupled-ode"]
    assert applicable_oracles(load_config(resolve_config_path("oracleB.cfg")).problem()) == ["coupled-ode"]


def test_solver_checks_oracle_b():
    spec = load_config(resolve_config_path("oracleB.cfg")).problem()
    (check,) = solver_checks(spec, solve(spec, keep_policy=False))
    assert check.passed, check.line()
