import math

import numpy as np
import pytest

from liquidex.grid import GridSpec, build_grid, check_stability
from liquidex.model import (GbmProvider, ImpactSpec, LinearImpact, RegimeGbmParams, identity_block, base_problem,
                            validate_generator)
from liquidex.solver import (NonFiniteValue, StabilityRefused, _Stepper, convergence_study, extract_policy_slice,
                             init_terminal, solve, step, write_slice_csv)

from .conftest import BASE_Q, oracle_a_spec


class TestTerminal:
    grid = GridSpec(n_tau=1, n_x=20, n_z=3, horizon=1.0, x_max=100.0, z_min=-1.0, z_max=2.0)

    def test_branch_value(self, base_spec):
        w = init_terminal(self.grid, base_spec.impact, 2)
        assert w[1, 1, 0] == pytest.approx(5.0, abs=1e-12)  # x=5, z=0

    def test_zero_holding(self, base_spec):
        assert np.all(init_terminal(self.grid, base_spec.impact, 2)[0] == 0)

    def test_last_branch(self, base_spec):
        w = init_terminal(self.grid, base_spec.impact, 2)
        assert w[12, 2, 1] == pytest.approx(47 * math.e, rel=1e-14)  # x=60, z=1


def _flat_spec(mu=0.0, sigma=0.0, beta=0.0):
    return oracle_a_spec(model=GbmProvider(RegimeGbmParams((mu,), (sigma,))), beta=beta, upsilon_max=0.0)


def test_zero_slice_stays_zero():
    spec = base_problem(upsilon_max=0.0)
    grid = build_grid(spec, 10, 30)
    w, pol = step(np.zeros((11, 31, 2)), spec, grid)
    assert np.all(w == 0) and np.all(pol == 0)


def test_frozen_dynamics_copy_slice(rng):
    spec = _flat_spec()
    grid = GridSpec(n_tau=4, n_x=6, n_z=5, horizon=1.0, x_max=100.0, z_min=-1.0, z_max=2.0)
    prev = rng.uniform(0, 10, size=(7, 6, 1))
    prev[0] = 0
    w, _ = step(prev, spec, grid)
    np.testing.assert_array_equal(w, prev)


def _transcribe(prev, spec, grid, i, j, ell, central):
    """Term-by-term scalar evaluation of the explicit update at one interior point."""
    mu, sig = (0.3, -0.1)[ell], (0.2, 0.4)[ell]
    other = 1 - ell
    q_off = BASE_Q[ell][other]
    dt, dz, dx = grid.d_tau, grid.d_z, grid.d_x
    beta = spec.beta
    w = lambda a, b, c: float(prev[a, b, c])
    if central:
        dxw = (w(i + 1, j, ell) - w(i - 1, j, ell)) / (2 * dx)
    else:
        dxw = (w(i, j, ell) - w(i - 1, j, ell)) / dx
    sup = max(-u * dxw + (1 - math.exp(-0.005 * u)) / 0.005 * math.exp(grid.z(j)) for u in range(101))
    return dt * ((-beta + 1 / dt - q_off - sig**2 / dz**2) * w(i, j, ell)
                 + ((mu - sig**2 / 2) / (2 * dz) + sig**2 / (2 * dz**2)) * w(i, j + 1, ell)
                 + (-(mu - sig**2 / 2) / (2 * dz) + sig**2 / (2 * dz**2)) * w(i, j - 1, ell)
                 + q_off * w(i, j, other)
                 + sup)


@pytest.mark.parametrize("scheme", ["central", "upwind"])
def test_single_point_transcription(scheme, base_spec):
    grid = GridSpec(n_tau=400, n_x=2, n_z=2, horizon=1.0, x_max=100.0, z_min=-1.0, z_max=2.0)
    prev = init_terminal(grid, base_spec.impact, 2)
    prev[1, 1, 1] *= 0.9  # break the regime symmetry
    w, _ = step(prev, base_spec, grid, scheme)
    for ell in range(2):
        assert w[1, 1, ell] == pytest.approx(_transcribe(prev, base_spec, grid, 1, 1, ell, scheme == "central"),
                                             rel=1e-13)


def test_boundary_rows(base_spec, rng):
    grid = GridSpec(n_tau=400, n_x=4, n_z=4, horizon=1.0, x_max=100.0, z_min=-1.0, z_max=2.0)
    prev = np.cumsum(rng.uniform(0, 1, (5, 5, 2)), axis=0)
    prev[0] = 0
    w, _ = step(prev, base_spec, grid)
    assert np.all(w[0] == 0)
    # x = x_max uses the backward difference; z edges use proportional ghosts
    ghost = grid.z(4) + grid.d_z
    i, j, ell = 4, 4, 0
    dxw = (prev[4, 4, 0] - prev[3, 4, 0]) / grid.d_x
    wjp = prev[4, 4, 0] * math.exp(grid.d_z)
    a, b2 = 0.3 - 0.02, 0.04
    wz = (wjp - prev[4, 3, 0]) / (2 * grid.d_z)
    wzz = (wjp + prev[4, 3, 0] - 2 * prev[4, 4, 0]) / grid.d_z**2
    sup = max(-u * dxw + (1 - math.exp(-0.005 * u)) / 0.005 * math.exp(grid.z(j)) for u in range(101))
    expected = prev[i, j, ell] + grid.d_tau * (-0.01 * prev[i, j, ell] + a * wz + 0.5 * b2 * wzz
                                               - 0.5 * prev[i, j, 0] + 0.5 * prev[i, j, 1] + sup)
    assert w[i, j, ell] == pytest.approx(expected, rel=1e-13)
    assert ghost > grid.z_max


def test_non_finite_value_aborts(base_spec):
    grid = GridSpec(n_tau=400, n_x=4, n_z=4, horizon=1.0, x_max=100.0, z_min=-1.0, z_max=2.0)
    prev = init_terminal(grid, base_spec.impact, 2)
    prev[2, 3, 1] = np.inf
    with pytest.raises(NonFiniteValue) as info:
        step(prev, base_spec, grid)
    assert info.value.index[0] == 1


def test_stability_refusal(base_spec):
    grid = build_grid(base_spec, 20, 30, n_tau=20)
    with pytest.raises(StabilityRefused):
        solve(base_spec, grid)
    assert solve(base_spec, grid, force=True).grid.n_tau == 20


def test_unknown_scheme(base_spec):
    with pytest.raises(ValueError):
        solve(base_spec, build_grid(base_spec, 20, 30), scheme="sideways")


class TestBaseSolution:
    def test_invariants(self, base_solution, base_spec):
        assert base_solution.value.invariant_violations(base_spec.impact) == []

    def test_monotone_in_state(self, base_solution):
        w = base_solution.value.data
        tol = 1e-9 * (1 + np.abs(w))
        assert np.all(np.diff(w, axis=1) >= -tol[:, 1:])
        assert np.all(np.diff(w, axis=2) >= -tol[:, :, 1:])

    def test_policy_entries_are_controls(self, base_solution, base_spec):
        assert base_solution.policy.index.max() < len(base_spec.controls)
        assert set(np.unique(base_solution.policy.rates)) <= set(base_spec.controls)

    def test_regime_dominance(self, base_solution):
        rates = base_solution.policy.slice(base_solution.grid.n_tau)
        assert np.all(rates[1:, :, 1] >= rates[1:, :, 0] - 1.0)

    def test_regime1_keeps_small_holdings(self, base_solution):
        rates = base_solution.policy.slice(base_solution.grid.n_tau)
        assert np.all(rates[1:6, 20, 0] == 0)

    def test_policy_slice_table(self, base_solution):
        table, n = extract_policy_slice(base_solution.policy, 0.0)
        g = base_solution.grid
        assert n == g.n_tau
        assert len(table) == (g.n_x + 1) * (g.n_z + 1) * 2
        assert list(table["regime"][[0, -1]]) == [1, 2]
        assert not table["actionable"][table["x"] == 0].any()
        assert table["actionable"][table["x"] > 0].all()

    def test_reads_back_value(self, base_solution):
        g = base_solution.grid
        w = base_solution.value.slice(g.n_tau)
        assert base_solution.V(0.0, 50.0, 1.0, 0) == pytest.approx(w[50, 20, 0], rel=1e-12)

    def test_exponential_impact_below_linear(self, base_solution, linear_base_solution):
        assert base_solution.grid == linear_base_solution.grid
        diff = base_solution.value.data - linear_base_solution.value.data
        assert diff.max() <= 1e-9


def test_linear_solution_invariants(linear_base_solution, base_spec):
    sol = linear_base_solution
    assert sol.value.invariant_violations(sol.spec.impact) == []
    assert set(np.unique(sol.policy.rates)) <= {0.0, 100.0}


def test_scheme_monotonicity(base_spec):
    grid = build_grid(base_spec, 10, 24)
    assert check_stability(grid, base_spec).ok
    assert all(check_stability(grid, base_spec).z_monotone)
    rng = np.random.default_rng(99)
    stepper = _Stepper(base_spec, grid, "upwind", 1)
    try:
        for _ in range(1000):
            a = rng.uniform(0, 50, size=(11, 25, 2))
            b = a + rng.uniform(0, 5, size=a.shape) * (rng.random(a.shape) < 0.5)
            a[0] = b[0] = 0
            wa, _ = stepper(a, 0)
            wb, _ = stepper(b, 0)
            assert np.all(wb >= wa - 1e-12 * (1 + np.abs(wa)))
    finally:
        stepper.close()


def test_beta_comparison():
    lo, hi = base_problem(beta=0.01), base_problem(beta=0.2)
    grid = build_grid(hi, 50, 30)
    assert check_stability(grid, lo).ok
    v_lo = solve(lo, grid, store_steps="all", keep_policy=False).value.data
    v_hi = solve(hi, grid, store_steps="all", keep_policy=False).value.data
    assert np.all(v_lo >= v_hi - 1e-8)
    assert (v_lo - v_hi).max() > 0


def test_bitwise_independent_of_workers(base_spec):
    grid = build_grid(base_spec, 60, 30)
    runs = [solve(base_spec, grid, workers=k) for k in (1, 2, 3, 7)]
    for other in runs[1:]:
        assert np.array_equal(runs[0].value.data, other.value.data)
        assert np.array_equal(runs[0].policy.index, other.policy.index)


def test_workers_env(monkeypatch, base_spec):
    from liquidex.solver import default_workers
    monkeypatch.setenv("LIQUIDEX_WORKERS", "3")
    assert default_workers() == 3


def test_slice_csv(tmp_path, base_spec):
    grid = build_grid(base_spec, 4, 30)
    sol = solve(base_spec, grid)
    path = tmp_path / "v.csv"
    write_slice_csv(path, grid, grid.n_tau, sol.value.slice(grid.n_tau), "value")
    lines = path.read_text().splitlines()
    assert lines[0] == "regime,t,x,s,value"
    assert len(lines) == 1 + 5 * 31 * 2
    ell, t, x, s, v = lines[1 + 31 + 2].split(",")
    assert (ell, float(t), float(x)) == ("1", 0.0, 25.0)
    assert float(s) == float(np.exp(grid.zs[2]))
    assert float(v) == sol.value.slice(grid.n_tau)[1, 2, 0]
    assert lines[-1].startswith("2,")
    write_slice_csv(tmp_path / "w.csv", grid, grid.n_tau, sol.value.slice(grid.n_tau), "value")
    assert (tmp_path / "w.csv").read_bytes() == path.read_bytes()


def test_oracle_a_hold_value():
    spec = oracle_a_spec()
    sol = solve(spec)
    g = sol.grid
    w = sol.value.slice(g.n_tau)[:, :, 0]
    exact = g.xs[:, None] * np.exp(g.zs)[None, :] * math.exp(0.29)
    inner = (g.xs[:, None] >= 10) & (g.xs[:, None] <= 90) & (g.zs[None, :] >= -0.5 - 1e-9) & (g.zs[None, :] <= 1.5 + 1e-9)
    assert (np.abs(w - exact)[inner] / exact[inner]).max() < 0.01
    assert np.all(sol.policy.rates[-1][1:] == 0)


def test_multi_regime_generalisation():
    q = [[-1.0, 0.5, 0.5], [0.2, -0.4, 0.2], [0.0, 1.0, -1.0]]
    spec = oracle_a_spec(model=GbmProvider(RegimeGbmParams((0.2, 0.05, -0.1), (0.2, 0.3, 0.3))),
                         generator=validate_generator(q), upsilon_max=0.0)
    sol = solve(spec, build_grid(spec, 50, 40))
    from liquidex.verify import hold_factors
    f = hold_factors(0.0, spec.generator, [0.2, 0.05, -0.1], spec.beta, 1.0)
    for ell in range(3):
        assert sol.V(0.0, 50.0, 1.0, ell) == pytest.approx(50 * f[ell], rel=5e-3)


def test_convergence_deterministic():
    spec = oracle_a_spec()
    a = convergence_study(spec, (50, 30), 2, [(50.0, 1.0, 0)])
    b = convergence_study(spec, (50, 30), 2, [(50.0, 1.0, 0)])
    assert np.array_equal(a.values, b.values)
    assert a.levels[1].n_x == 100 and a.levels[1].n_z == 60


def test_convergence_levels_validated():
    with pytest.raises(ValueError):
        convergence_study(oracle_a_spec(), levels=1)


@pytest.mark.slow
def test_oracle_a_gaps_shrink():
    rep = convergence_study(oracle_a_spec(), (100, 60), 3, [(50.0, 1.0, 0)])
    gaps = rep.gaps[:, 0]
    assert gaps[1] < gaps[0]
    exact = 50 * math.exp(0.29)
    errors = np.abs(rep.values[:, 0] - exact)
    assert np.all(np.diff(errors) < 0)
