"""Closed-form and ODE reference values for special cases of the liquidation problem."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import GeneratorMatrix


def closed_form_hold_value(x: float, s: float, t: float, mu: float, beta: float, T: float) -> float:
    """Value of never selling: x s exp((mu - beta)(T - t)).

    Optimal for one regime with linear impact, identity block sale and mu >= beta.
    """
    return x * s * math.exp((mu - beta) * (T - t))


def constant_rate_value(x: float, s: float, N: float, mu: float, beta: float, T: float,
                        g: Callable[[float], float]) -> float:
    """Expected payoff of selling at constant rate N with linear impact, one regime, from t = 0."""
    theta = min(T, x / N)
    k = mu - beta
    if k == 0:
        flow = N * s * theta
    else:
        flow = N * s * math.expm1(k * theta) / k
    block = 0.0
    if theta == T:
        block = math.exp(-beta * T) * float(g(max(x - N * T, 0.0))) * s * math.exp(mu * T)
    return flow + block


def _rk4(f, y0: np.ndarray, t0: float, t1: float, steps: int) -> np.ndarray:
    h = (t1 - t0) / steps
    y = np.array(y0, dtype=float)
    t = t0
    for _ in range(steps):
        k1 = f(t, y)
        k2 = f(t + h / 2, y + h / 2 * k1)
        k3 = f(t + h / 2, y + h / 2 * k2)
        k4 = f(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return y


def hold_factors(t: float, generator: GeneratorMatrix, mu_per_regime, beta: float, T: float,
                 steps: int = 10_000) -> np.ndarray:
    """f(t, .) solving f' = (beta - mu) f - Q f backwards from f(T) = 1."""
    q = np.asarray(generator.q, dtype=float)
    mu = np.asarray(mu_per_regime, dtype=float)

    def rhs(_, f):
        # Q f already includes the -q_ll f_l diagonal term
        return (beta - mu) * f - q @ f

    return _rk4(rhs, np.ones(len(mu)), T, t, max(steps, 10_000))


def coupled_ode_value(x: float, s: float, t: float, regime: int, generator: GeneratorMatrix, mu_per_regime,
                      beta: float, T: float, steps: int = 10_000) -> float:
    """x s f(t, regime) for the never-sell control with identity block sale."""
    return x * s * float(hold_factors(t, generator, mu_per_regime, beta, T, steps)[regime])


@dataclass
class Check:
    name: str
    computed: float
    reference: float
    tolerance: float
    relative: bool = True

    @property
    def error(self) -> float:
        err = abs(self.computed - self.reference)
        return err / abs(self.reference) if self.relative and self.reference != 0 else err

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tolerance)

    def line(self) -> str:
        kind = "rel" if self.relative else "abs"
        return (f"{'PASS' if self.passed else 'FAIL'}  {self.name:<48} computed={self.computed:.10g} "
                f"reference={self.reference:.10g} {kind}err={self.error:.3e} tol={self.tolerance:g}")


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------

INTERIOR_X = (10.0, 90.0)
INTERIOR_LOG_S = (-0.5, 1.5)
SOLVER_TOL = 0.01


def interior_mask(grid) -> np.ndarray:
    x = grid.xs[:, None]
    z = grid.zs[None, :]
    eps = 1e-9
    return ((x >= INTERIOR_X[0] - eps) & (x <= INTERIOR_X[1] + eps)
            & (z >= INTERIOR_LOG_S[0] - eps) & (z <= INTERIOR_LOG_S[1] + eps))


def solver_vs_reference(value_slice: np.ndarray, reference: np.ndarray, grid) -> float:
    """Largest relative error over the interior box, all regimes."""
    mask = np.broadcast_to(interior_mask(grid)[:, :, None], value_slice.shape)
    return float((np.abs(value_slice[mask] - reference[mask]) / np.abs(reference[mask])).max())


def oracle_self_checks() -> list[Check]:
    """Oracles against the zero-volatility simulator and an independent matrix exponential."""
    from scipy.linalg import expm

    from .model import (GbmProvider, ImpactSpec, LinearImpact, ProblemSpec, RegimeGbmParams, identity_block,
                        validate_generator)
    from .simulate import ConstantPolicy, simulate_path

    mu, beta, T = 0.3, 0.01, 1.0
    flat = ProblemSpec(model=GbmProvider(RegimeGbmParams((mu,), (0.0,))), generator=validate_generator([[0.0]]),
                       impact=ImpactSpec(LinearImpact(), identity_block()), beta=beta, horizon=T)
    checks = []
    held = simulate_path(ConstantPolicy(0.0), flat, 10.0, 1.0, 0, 1e-3, seed=0).J
    checks.append(Check("hold-value vs sigma=0 simulator", held, closed_form_hold_value(10, 1, 0, mu, beta, T), 1e-12))
    sold = simulate_path(ConstantPolicy(100.0), flat, 100.0, 1.0, 0, 1e-4, seed=0).J
    checks.append(Check("constant-rate vs sigma=0 simulator", sold,
                        constant_rate_value(100, 1, 100, mu, beta, T, lambda x: x), 1e-4))
    part = simulate_path(ConstantPolicy(40.0), flat, 100.0, 1.0, 0, 1e-4, seed=0).J
    checks.append(Check("constant-rate with block sale vs simulator", part,
                        constant_rate_value(100, 1, 40, mu, beta, T, lambda x: x), 1e-4))
    gen = validate_generator([[-0.5, 0.5], [1.0, -1.0]])
    mus = np.array([0.3, -0.1])
    f_exact = expm((np.diag(mus - beta) + gen.q) * T) @ np.ones(2)
    f_ode = hold_factors(0.0, gen, mus, beta, T)
    for ell in range(2):
        checks.append(Check(f"coupled-ode regime {ell + 1} vs matrix exponential", float(f_ode[ell]),
                            float(f_exact[ell]), 1e-10))
    return checks


def applicable_oracles(spec) -> list[str]:
    from .model import LinearImpact

    out = []
    identity_g = spec.impact.g.breaks.size == 0 and np.allclose(spec.impact.g.coeffs[0, :2], [0.0, 1.0]) \
        and not np.any(spec.impact.g.coeffs[0, 2:])
    if spec.model.control_dependent or not identity_g:
        return out
    try:
        mus = [spec.model.log_coefficients(ell)[0] for ell in range(spec.m)]
    except NotImplementedError:
        return out
    if spec.m == 1 and isinstance(spec.impact.phi, LinearImpact) and mus[0] >= spec.beta:
        out.append("hold-value")
    if spec.upsilon_max == 0:
        out.append("coupled-ode")
    return out


def solver_checks(spec, solution) -> list[Check]:
    """Compare a finished solve against every oracle that applies to its configuration."""
    grid = solution.grid
    w = solution.value.slice(grid.n_tau)
    x = grid.xs[:, None]
    s = np.exp(grid.zs)[None, :]
    checks = []
    mus = [spec.model.log_coefficients(ell)[0] for ell in range(spec.m)] if applicable_oracles(spec) else []
    for name in applicable_oracles(spec):
        if name == "hold-value":
            ref = (x * s * math.exp((mus[0] - spec.beta) * spec.horizon))[:, :, None]
        else:
            f = hold_factors(0.0, spec.generator, mus, spec.beta, spec.horizon)
            ref = (x * s)[:, :, None] * f[None, None, :]
        err = solver_vs_reference(w, ref, grid)
        checks.append(Check(f"solver vs {name} (max over interior)", err, 0.0, SOLVER_TOL, relative=False))
    return checks
