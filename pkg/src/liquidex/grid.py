"""Uniform (tau, x, z) grid with z = log s and tau = T - t, plus explicit-step stability bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import InvalidParameter, LiquidexError, ProblemSpec, ValidationError, log_coefficient_tables

SCHEMES = ("upwind", "central")
SAFETY = 0.9


class DegenerateDomain(LiquidexError, ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    n_tau: int
    n_x: int
    n_z: int
    horizon: float
    x_max: float
    z_min: float
    z_max: float

    @property
    def d_tau(self) -> float:
        return self.horizon / self.n_tau

    @property
    def d_x(self) -> float:
        return self.x_max / self.n_x

    @property
    def d_z(self) -> float:
        return (self.z_max - self.z_min) / self.n_z

    def x(self, i):
        return np.asarray(i) * self.d_x

    def z(self, j):
        return self.z_min + np.asarray(j) * self.d_z

    def s(self, j):
        return np.exp(self.z(j))

    def tau(self, n):
        return np.asarray(n) * self.d_tau

    def t(self, n):
        return self.horizon - self.tau(n)

    @property
    def xs(self) -> np.ndarray:
        return self.x(np.arange(self.n_x + 1))

    @property
    def zs(self) -> np.ndarray:
        return self.z(np.arange(self.n_z + 1))

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_x + 1, self.n_z + 1

    def step_for_time(self, t: float) -> int:
        """Nearest tau-step for calendar time t, clamped to the grid."""
        n = int(round((self.horizon - t) / self.d_tau))
        return min(max(n, 0), self.n_tau)

    def with_n_tau(self, n_tau: int) -> "GridSpec":
        return GridSpec(n_tau, self.n_x, self.n_z, self.horizon, self.x_max, self.z_min, self.z_max)


@dataclass(frozen=True)
class StabilityReport:
    scheme: str
    d_tau: float
    max_d_tau: float
    binding_regime: int
    z_monotone: tuple[bool, ...]

    @property
    def time_step_ok(self) -> bool:
        return self.d_tau <= self.max_d_tau

    @property
    def ok(self) -> bool:
        return self.time_step_ok and all(self.z_monotone)

    def describe(self) -> str:
        state = "ok" if self.ok else "FAILED"
        bad = [k + 1 for k, ok in enumerate(self.z_monotone) if not ok]
        msg = f"stability {state}: d_tau={self.d_tau:.6g}, max_d_tau={self.max_d_tau:.6g} (regime {self.binding_regime + 1})"
        if bad:
            msg += f"; z-monotonicity violated in regimes {bad}"
        return msg


def _max_d_tau(spec: ProblemSpec, d_x: float, d_z: float, zs, scheme: str, t: float = 0.0):
    _, b2 = log_coefficient_tables(spec.model, t, np.exp(zs), spec.controls)
    best, binding = math.inf, 0
    adv = spec.controls / d_x if scheme == "upwind" else np.zeros_like(spec.controls)
    for ell in range(spec.m):
        rate = spec.beta + abs(spec.generator.q[ell, ell]) + (b2[ell] / d_z**2 + adv[None, :]).max()
        bound = math.inf if rate == 0 else 1.0 / rate
        if bound < best:
            best, binding = bound, ell
    return best, binding


def check_stability(grid: GridSpec, spec: ProblemSpec, scheme: str = "upwind") -> StabilityReport:
    if scheme not in SCHEMES:
        raise ValidationError([InvalidParameter("scheme", scheme)])
    max_dt, binding = _max_d_tau(spec, grid.d_x, grid.d_z, grid.zs, scheme)
    a, b2 = log_coefficient_tables(spec.model, 0.0, grid.s(np.arange(grid.n_z + 1)), spec.controls)
    # central z-differences need |a| dz <= b2 for nonnegative neighbour weights
    z_ok = tuple(bool(np.all(grid.d_z * np.abs(a[ell]) <= b2[ell])) for ell in range(spec.m))
    return StabilityReport(scheme, grid.d_tau, max_dt, binding, z_ok)


def build_grid(spec: ProblemSpec, n_x: int = 100, n_z: int = 60, n_tau: int | str | None = "auto",
               scheme: str = "upwind") -> GridSpec:
    """Build the grid; ``n_tau="auto"`` picks the largest integer count with d_tau <= 0.9 * max stable step."""
    z_min, z_max = math.log(spec.s_min), math.log(spec.s_max)
    if not z_max > z_min or not spec.x_max > 0 or not spec.horizon > 0:
        raise DegenerateDomain((z_min, z_max, spec.x_max, spec.horizon))
    if n_x < 2 or n_z < 2:
        raise ValidationError([InvalidParameter("cell counts must be >= 2", n_x, n_z)])
    if n_tau in (None, "auto"):
        d_z = (z_max - z_min) / n_z
        zs = z_min + np.arange(n_z + 1) * d_z
        max_dt, _ = _max_d_tau(spec, spec.x_max / n_x, d_z, zs, scheme)
        n_tau = 2 if math.isinf(max_dt) else max(2, math.ceil(spec.horizon / (SAFETY * max_dt)))
    n_tau = int(n_tau)
    if n_tau < 2:
        raise ValidationError([InvalidParameter("n_tau must be >= 2", n_tau)])
    return GridSpec(n_tau, int(n_x), int(n_z), float(spec.horizon), float(spec.x_max), z_min, z_max)
