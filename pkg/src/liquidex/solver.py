"""Explicit finite-difference march of the transformed HJB system.

State arrays are laid out ``(x-index, z-index, regime)`` per tau-step. The
x = 0 row is held at zero; z-edges use ghost values that continue W
proportionally to s.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba
import numpy as np

from .grid import SCHEMES, GridSpec, StabilityReport, build_grid, check_stability
from .model import (InvalidParameter, LiquidexError, ProblemSpec, ValidationError,
                    log_coefficient_tables)

WORKERS_ENV = "LIQUIDEX_WORKERS"


class StabilityRefused(LiquidexError):
    def __init__(self, report: StabilityReport):
        self.report = report
        super().__init__(report.describe())


class NonFiniteValue(LiquidexError, FloatingPointError):
    def __init__(self, index):
        self.index = index
        super().__init__(f"non-finite value at (n, i, j, regime) = {index}")


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV, "").strip()
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------------


@numba.njit(nogil=True, cache=True)
def _step_band(wp, wn, pol, i0, i1, d_tau, d_x, d_z, beta, q, controls, shortfall, s, a, b2,
               control_free, central, ez_up, ez_dn, policy_only):
    n_x = wp.shape[0] - 1
    n_z = wp.shape[1] - 1
    m = wp.shape[2]
    n_u = controls.shape[0]
    for i in range(i0, i1):
        for j in range(n_z + 1):
            sj = s[j]
            for ell in range(m):
                w0 = wp[i, j, ell]
                wjp = wp[i, j + 1, ell] if j < n_z else w0 * ez_up
                wjm = wp[i, j - 1, ell] if j > 0 else w0 * ez_dn
                wz = (wjp - wjm) / (2.0 * d_z)
                wzz = (wjp + wjm - 2.0 * w0) / (d_z * d_z)
                if i == 0:
                    dx_w = (wp[1, j, ell] - w0) / d_x
                elif central and i < n_x:
                    dx_w = (wp[i + 1, j, ell] - wp[i - 1, j, ell]) / (2.0 * d_x)
                else:
                    dx_w = (w0 - wp[i - 1, j, ell]) / d_x
                margin = sj - dx_w
                best = -np.inf
                kbest = 0
                for k in range(n_u):
                    v = controls[k] * margin - shortfall[k] * sj
                    if not control_free:
                        v += a[ell, j, k] * wz + 0.5 * b2[ell, j, k] * wzz
                    if v > best:
                        best = v
                        kbest = k
                pol[i, j, ell] = kbest
                if policy_only:
                    continue
                if i == 0:
                    wn[i, j, ell] = 0.0
                    continue
                coupling = q[ell, ell] * w0
                for other in range(m):
                    if other != ell:
                        coupling += q[ell, other] * wp[i, j, other]
                zpart = 0.0
                if control_free:
                    zpart = a[ell, j, 0] * wz + 0.5 * b2[ell, j, 0] * wzz
                wn[i, j, ell] = w0 + d_tau * (-beta * w0 + zpart + coupling + best)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------


def _bilinear(slice_, grid: GridSpec, x: float, s: float, regime: int) -> float:
    fi = min(max(x / grid.d_x, 0.0), grid.n_x)
    fj = min(max((math.log(s) - grid.z_min) / grid.d_z, 0.0), grid.n_z)
    i0, j0 = min(int(fi), grid.n_x - 1), min(int(fj), grid.n_z - 1)
    wx, wz = fi - i0, fj - j0
    c = slice_[i0:i0 + 2, j0:j0 + 2, regime]
    return float((1 - wx) * ((1 - wz) * c[0, 0] + wz * c[0, 1]) + wx * ((1 - wz) * c[1, 0] + wz * c[1, 1]))


@dataclass
class ValueField:
    """W on the stored tau-steps; ``data[k]`` is step ``steps[k]``, indexed (i, j, regime)."""

    grid: GridSpec
    steps: tuple[int, ...]
    data: np.ndarray

    def slice(self, n: int) -> np.ndarray:
        try:
            return self.data[self.steps.index(n)]
        except ValueError:
            raise KeyError(f"tau-step {n} was not stored; stored: {self.steps}") from None

    def at_time(self, t: float) -> tuple[int, np.ndarray]:
        n = self.grid.step_for_time(t)
        return n, self.slice(n)

    def value(self, t: float, x: float, s: float, regime: int) -> float:
        """V(t, x, s, regime), bilinear in (x, log s) at the nearest stored step."""
        _, sl = self.at_time(t)
        return _bilinear(sl, self.grid, x, s, regime)

    def invariant_violations(self, impact) -> list[str]:
        out = []
        g = self.grid
        for n, sl in zip(self.steps, self.data):
            if np.any(sl[0] != 0):
                out.append(f"boundary row nonzero at step {n}")
            if not np.all(np.isfinite(sl)) or np.any(sl < 0):
                out.append(f"negative or non-finite value at step {n}")
            if n == 0:
                term = np.asarray(impact.g(g.xs))[:, None] * np.exp(g.zs)[None, :]
                if not np.array_equal(sl, np.broadcast_to(term[:, :, None], sl.shape)):
                    out.append("terminal slice mismatch")
        return out


@dataclass
class PolicyField:
    """Optimal control indices into ``controls`` for every tau-step, indexed (n, i, j, regime).

    ``index[n]`` is the maximiser of the Hamiltonian evaluated on W at step n,
    i.e. the rate applied over [tau_n, tau_n + d_tau]. The x = 0 row is
    informational only.
    """

    grid: GridSpec
    controls: np.ndarray
    index: np.ndarray

    @property
    def rates(self) -> np.ndarray:
        return self.controls[self.index]

    def slice(self, n: int) -> np.ndarray:
        return self.controls[self.index[n]]

    def rate(self, t: float, x: float, s: float, regime: int) -> float:
        g = self.grid
        n = g.step_for_time(t)
        i = min(max(int(round(x / g.d_x)), 1 if x > 0 else 0), g.n_x)
        j = min(max(int(round((math.log(s) - g.z_min) / g.d_z)), 0), g.n_z)
        return float(self.controls[self.index[n, i, j, regime]])


@dataclass
class Solution:
    value: ValueField
    policy: PolicyField | None
    report: StabilityReport
    spec: ProblemSpec = field(repr=False)
    scheme: str = "upwind"

    @property
    def grid(self) -> GridSpec:
        return self.value.grid

    def V(self, t: float, x: float, s: float, regime: int) -> float:
        return self.value.value(t, x, s, regime)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def init_terminal(grid: GridSpec, impact, m: int) -> np.ndarray:
    """W(0, x, z) = g(x) e^z for every regime."""
    term = np.asarray(impact.g(grid.xs), dtype=float)[:, None] * np.exp(grid.zs)[None, :]
    return np.repeat(term[:, :, None], m, axis=2)


class _Stepper:
    """Precomputed coefficient tables and worker bands for one (spec, grid, scheme)."""

    def __init__(self, spec: ProblemSpec, grid: GridSpec, scheme: str, workers: int | None):
        if scheme not in SCHEMES:
            raise ValidationError([InvalidParameter("scheme", scheme)])
        self.spec, self.grid, self.scheme = spec, grid, scheme
        self.s = np.exp(grid.zs)
        self.controls = np.ascontiguousarray(spec.controls, dtype=float)
        self.shortfall = np.ascontiguousarray(spec.impact.shortfall(self.controls), dtype=float)
        self.q = np.ascontiguousarray(spec.generator.q, dtype=float)
        self._tables_t = None
        self.tables(grid.horizon)
        workers = workers or default_workers()
        n_rows = grid.n_x + 1
        edges = np.linspace(0, n_rows, min(workers, n_rows) + 1).round().astype(int)
        self.bands = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
        self.pool = ThreadPoolExecutor(len(self.bands)) if len(self.bands) > 1 else None

    def tables(self, t: float):
        if self._tables_t is None or (self.spec.model.time_dependent and t != self._tables_t):
            a, b2 = log_coefficient_tables(self.spec.model, t, self.s, self.controls)
            self.a, self.b2 = np.ascontiguousarray(a), np.ascontiguousarray(b2)
            self._tables_t = t
        return self.a, self.b2

    def __call__(self, wp: np.ndarray, n: int, policy_only: bool = False):
        g = self.grid
        a, b2 = self.tables(g.horizon - n * g.d_tau)
        wn = np.empty_like(wp)
        pol = np.empty(wp.shape, dtype=np.uint16)
        args = (g.d_tau, g.d_x, g.d_z, self.spec.beta, self.q, self.controls, self.shortfall, self.s, a, b2,
                not self.spec.model.control_dependent, self.scheme == "central",
                math.exp(g.d_z), math.exp(-g.d_z), policy_only)
        if self.pool is None:
            _step_band(wp, wn, pol, 0, wp.shape[0], *args)
        else:
            futures = [self.pool.submit(_step_band, wp, wn, pol, i0, i1, *args) for i0, i1 in self.bands]
            for f in futures:
                f.result()
        if policy_only:
            return None, pol
        if not np.all(np.isfinite(wn)):
            i, j, ell = np.argwhere(~np.isfinite(wn))[0]
            raise NonFiniteValue((n + 1, int(i), int(j), int(ell)))
        return wn, pol

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def step(prev: np.ndarray, spec: ProblemSpec, grid: GridSpec, scheme: str = "upwind", n: int = 0,
         workers: int | None = 1):
    """Advance one tau-step from slice n.

    Returns ``(W^{n+1}, policy_n)`` where ``policy_n`` holds control indices
    maximising the Hamiltonian on ``prev``.
    """
    stepper = _Stepper(spec, grid, scheme, workers)
    try:
        return stepper(np.ascontiguousarray(prev, dtype=float), n)
    finally:
        stepper.close()


def solve(spec: ProblemSpec, grid: GridSpec | None = None, scheme: str = "upwind", force: bool = False,
          store_steps: Iterable[int] | str | None = None, keep_policy: bool = True,
          workers: int | None = None) -> Solution:
    """March from tau = 0 (t = T) to tau = T (t = 0).

    ``store_steps`` selects which W slices are kept: ``None`` keeps the
    terminal and final steps, ``"all"`` keeps every step.
    """
    grid = grid or build_grid(spec, scheme=scheme)
    report = check_stability(grid, spec, scheme)
    if not report.ok and not force:
        raise StabilityRefused(report)
    if store_steps is None:
        keep = {0, grid.n_tau}
    elif store_steps == "all":
        keep = set(range(grid.n_tau + 1))
    else:
        keep = {int(n) for n in store_steps}
    w = init_terminal(grid, spec.impact, spec.m)
    stored = {0: w} if 0 in keep else {}
    policy = np.empty((grid.n_tau + 1, *w.shape), dtype=np.uint16) if keep_policy else None
    stepper = _Stepper(spec, grid, scheme, workers)
    try:
        for n in range(grid.n_tau):
            w, pol = stepper(w, n)
            if policy is not None:
                policy[n] = pol
            if n + 1 in keep:
                stored[n + 1] = w
        if policy is not None:
            policy[grid.n_tau] = stepper(w, grid.n_tau, policy_only=True)[1]
    finally:
        stepper.close()
    steps = tuple(sorted(stored))
    value = ValueField(grid, steps, np.stack([stored[n] for n in steps]))
    pf = PolicyField(grid, np.asarray(spec.controls), policy) if policy is not None else None
    return Solution(value, pf, report, spec, scheme)


def extract_policy_slice(policy: PolicyField, t: float) -> tuple[np.ndarray, int]:
    """Flat (regime, x, s, control, actionable) table at the tau-step nearest t.

    Rows are ordered by (regime, x-index, z-index); regimes are 1-based.
    Returns the table and the tau-step actually used.
    """
    g = policy.grid
    n = g.step_for_time(t)
    rates = policy.slice(n)
    m = rates.shape[2]
    ell, i, j = np.meshgrid(np.arange(m), np.arange(g.n_x + 1), np.arange(g.n_z + 1), indexing="ij")
    table = np.zeros(ell.size, dtype=[("regime", "i8"), ("x", "f8"), ("s", "f8"), ("control", "f8"),
                                      ("actionable", "?")])
    table["regime"] = ell.ravel() + 1
    table["x"] = g.x(i.ravel())
    table["s"] = g.s(j.ravel())
    table["control"] = rates[i.ravel(), j.ravel(), ell.ravel()]
    table["actionable"] = i.ravel() > 0
    return table, n


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_slice_csv(path, grid: GridSpec, n: int, slice_: np.ndarray, column: str) -> None:
    """Rows in (regime, i, j) order; header ``regime,t,x,s,<column>``."""
    t = _fmt(grid.t(n))
    xs = [_fmt(v) for v in grid.xs]
    ss = [_fmt(v) for v in np.exp(grid.zs)]
    with open(path, "w", newline="") as fh:
        fh.write(f"regime,t,x,s,{column}\n")
        for ell in range(slice_.shape[2]):
            for i in range(grid.n_x + 1):
                for j in range(grid.n_z + 1):
                    fh.write(f"{ell + 1},{t},{xs[i]},{ss[j]},{_fmt(slice_[i, j, ell])}\n")


# ---------------------------------------------------------------------------
# convergence
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceLevel:
    n_x: int
    n_z: int
    n_tau: int
    values: np.ndarray


@dataclass
class ConvergenceReport:
    points: list[tuple[float, float, int]]
    levels: list[ConvergenceLevel]

    @property
    def values(self) -> np.ndarray:
        return np.array([lv.values for lv in self.levels])

    @property
    def gaps(self) -> np.ndarray:
        """|V_{k+1} - V_k| per reference point, shape (levels - 1, points)."""
        return np.abs(np.diff(self.values, axis=0))

    def ratios(self) -> np.ndarray:
        g = self.gaps
        with np.errstate(divide="ignore", invalid="ignore"):
            return g[:-1] / g[1:]


def convergence_study(spec: ProblemSpec, base_counts: tuple[int, int] = (100, 60), levels: int = 3,
                      points: Sequence[tuple[float, float, int]] = ((50.0, 1.0, 0), (50.0, 1.0, 1)),
                      scheme: str = "upwind", t: float = 0.0, workers: int | None = None) -> ConvergenceReport:
    """Solve on successively doubled (x, z) grids, d_tau re-derived each time.

    ``points`` are (x, s, regime) with 0-based regimes; values are read at time t.
    """
    if levels < 2:
        raise ValidationError([InvalidParameter("levels must be >= 2", levels)])
    out = []
    n_x, n_z = base_counts
    for k in range(levels):
        grid = build_grid(spec, n_x * 2**k, n_z * 2**k, "auto", scheme)
        n_t = grid.step_for_time(t)
        sol = solve(spec, grid, scheme, store_steps=[n_t], keep_policy=False, workers=workers)
        vals = np.array([sol.value.value(t, x, s, ell) for x, s, ell in points])
        out.append(ConvergenceLevel(grid.n_x, grid.n_z, grid.n_tau, vals))
    return ConvergenceReport(list(points), out)
