"""Market model, impact functions and problem configuration.

Regimes are 0-indexed here; user-facing I/O uses 1-based labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class LiquidexError(Exception):
    """Base class for all package errors."""


class ModelError(LiquidexError, ValueError):
    """A single violated model constraint."""

    def __init__(self, *args):
        self.args_ = args
        super().__init__(f"{type(self).__name__}({', '.join(map(repr, args))})")


class NonSquare(ModelError):
    pass


class NegativeOffDiagonal(ModelError):
    pass


class RowSumNonzero(ModelError):
    pass


class NegativeRate(ModelError):
    pass


class NegativeShares(ModelError):
    pass


class RegimeOutOfRange(ModelError):
    pass


class InvalidParameter(ModelError):
    pass


class ValidationError(LiquidexError, ValueError):
    """Raised with every issue found, not just the first."""

    def __init__(self, issues: Sequence[Exception]):
        self.issues = list(issues)
        super().__init__("; ".join(str(e) for e in self.issues))


# ---------------------------------------------------------------------------
# Markov chain
# ---------------------------------------------------------------------------

ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class GeneratorMatrix:
    q: np.ndarray

    def __post_init__(self):
        self.q.setflags(write=False)

    @property
    def m(self) -> int:
        return self.q.shape[0]

    def exit_rate(self, regime: int) -> float:
        return -float(self.q[regime, regime])

    def stationary_distribution(self) -> np.ndarray:
        """Solve pi Q = 0, sum(pi) = 1 by least squares."""
        m = self.m
        a = np.vstack([self.q.T, np.ones((1, m))])
        b = np.zeros(m + 1)
        b[-1] = 1.0
        pi, *_ = np.linalg.lstsq(a, b, rcond=None)
        return pi


def validate_generator(q) -> GeneratorMatrix:
    q = np.array(q, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 1:
        raise ValidationError([NonSquare(q.shape)])
    issues: list[Exception] = []
    m = q.shape[0]
    for i in range(m):
        for j in range(m):
            if i != j and q[i, j] < 0:
                issues.append(NegativeOffDiagonal(i, j))
        row = float(q[i].sum())
        if abs(row) > ROW_SUM_TOL:
            issues.append(RowSumNonzero(i, row))
    if issues:
        raise ValidationError(issues)
    return GeneratorMatrix(q)


# ---------------------------------------------------------------------------
# Price coefficients
# ---------------------------------------------------------------------------


class CoefficientProvider:
    """Drift and diffusion of the price SDE, in raw price units.

    Subclasses implement ``coefficients(t, s, rate, regime)``. Both returned
    values must vanish at s = 0.
    """

    m: int
    control_dependent: bool = False
    time_dependent: bool = False

    def coefficients(self, t, s, rate, regime):
        raise NotImplementedError

    def _check_regime(self, regime):
        if not 0 <= regime < self.m:
            raise RegimeOutOfRange(regime, self.m)

    def log_coefficients(self, regime: int) -> tuple[float, float, float]:
        """(mu, sigma, lam) of the log-price dynamics; only GBM-type providers."""
        raise NotImplementedError(f"{type(self).__name__} has no log-space form")


@dataclass(frozen=True)
class RegimeGbmParams:
    mu: tuple[float, ...]
    sigma: tuple[float, ...]

    def __post_init__(self):
        if len(self.mu) != len(self.sigma):
            raise ValidationError([InvalidParameter("mu/sigma length mismatch", len(self.mu), len(self.sigma))])
        bad = [InvalidParameter("sigma", k, v) for k, v in enumerate(self.sigma) if v < 0]
        if bad:
            raise ValidationError(bad)


class GbmProvider(CoefficientProvider):
    """mu(l)*s and sigma(l)*s per regime."""

    def __init__(self, params: RegimeGbmParams):
        self.params = params
        self.m = len(params.mu)
        self._mu = np.asarray(params.mu, dtype=float)
        self._sigma = np.asarray(params.sigma, dtype=float)

    def coefficients(self, t, s, rate, regime):
        self._check_regime(regime)
        return self._mu[regime] * s, self._sigma[regime] * s

    def log_coefficients(self, regime):
        self._check_regime(regime)
        return float(self._mu[regime]), float(self._sigma[regime]), 0.0

    def __repr__(self):
        return f"GbmProvider(mu={self.params.mu}, sigma={self.params.sigma})"


class PermanentImpactProvider(GbmProvider):
    """GBM with the selling rate depressing the drift: (mu(l) - lam*rate)*s."""

    def __init__(self, params: RegimeGbmParams, lam: float = 0.0):
        if lam < 0:
            raise ValidationError([InvalidParameter("lambda", lam)])
        super().__init__(params)
        self.lam = float(lam)
        self.control_dependent = self.lam > 0

    def coefficients(self, t, s, rate, regime):
        self._check_regime(regime)
        return (self._mu[regime] - self.lam * rate) * s, self._sigma[regime] * s

    def log_coefficients(self, regime):
        mu, sigma, _ = super().log_coefficients(regime)
        return mu, sigma, self.lam

    def __repr__(self):
        return f"PermanentImpactProvider(mu={self.params.mu}, sigma={self.params.sigma}, lam={self.lam})"


def drift_diffusion(model: CoefficientProvider, t: float, s: float, a: float, regime: int):
    if s < 0:
        raise InvalidParameter("price", s)
    if a < 0:
        raise NegativeRate(a)
    return model.coefficients(t, s, a, regime)


def log_coefficient_tables(model: CoefficientProvider, t: float, s, controls):
    """Coefficients of the log-price generator on a (regime, s, control) lattice.

    Returns ``(a, b2)`` with ``a = drift/s - diffusion**2/(2 s**2)`` and
    ``b2 = (diffusion/s)**2``, each shaped ``(m, len(s), len(controls))``.
    """
    s = np.asarray(s, dtype=float)
    controls = np.asarray(controls, dtype=float)
    a = np.empty((model.m, s.size, controls.size))
    b2 = np.empty_like(a)
    for ell in range(model.m):
        for k, u in enumerate(controls):
            drift, diff = model.coefficients(t, s, u, ell)
            vol = np.broadcast_to(np.asarray(diff, dtype=float) / s, s.shape)
            b2[ell, :, k] = vol * vol
            a[ell, :, k] = np.asarray(drift, dtype=float) / s - 0.5 * b2[ell, :, k]
    return a, b2


def lipschitz_diagnostic(model: CoefficientProvider, t_max: float, s_max: float, rate_max: float, n: int = 25):
    """Sampled Lipschitz and linear-growth constants in (t, s) for drift and diffusion.

    Returns the largest observed difference quotient and the largest
    ``|f| / (1 + s)`` over a uniform lattice.
    """
    ts = np.linspace(0.0, t_max, n)
    ss = np.linspace(0.0, s_max, n)
    rates = np.linspace(0.0, rate_max, 5)
    lip = 0.0
    growth = 0.0
    for ell in range(model.m):
        for u in rates:
            for t in ts:
                vals = np.array([model.coefficients(t, s, u, ell) for s in ss])
                dv = np.abs(np.diff(vals, axis=0)) / np.diff(ss)[:, None]
                lip = max(lip, float(dv.max()))
                growth = max(growth, float((np.abs(vals) / (1 + ss[:, None])).max()))
    return lip, growth


# ---------------------------------------------------------------------------
# Impact functions
# ---------------------------------------------------------------------------


class LinearImpact:
    name = "linear"

    def __call__(self, a):
        return np.asarray(a, dtype=float) * 1.0

    def __repr__(self):
        return "LinearImpact()"


class ExponentialImpact:
    """(1 - exp(-alpha*a)) / alpha."""

    name = "exponential"

    def __init__(self, alpha: float):
        if not alpha > 0:
            raise ValidationError([InvalidParameter("alpha", alpha)])
        self.alpha = float(alpha)

    def __call__(self, a):
        return -np.expm1(-self.alpha * np.asarray(a, dtype=float)) / self.alpha

    def __repr__(self):
        return f"ExponentialImpact(alpha={self.alpha})"


class TabulatedImpact:
    """Piecewise-linear concave impact through (0, 0); extrapolated with the last slope."""

    name = "tabulated"
    SLOPE_AT_ZERO_TOL = 0.05

    def __init__(self, xs: Sequence[float], ys: Sequence[float]):
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        issues: list[Exception] = []
        if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2:
            raise ValidationError([InvalidParameter("table shape", xs.shape, ys.shape)])
        if xs[0] != 0 or ys[0] != 0:
            issues.append(InvalidParameter("table must start at (0, 0)", xs[0], ys[0]))
        if np.any(np.diff(xs) <= 0):
            issues.append(InvalidParameter("table abscissae not increasing"))
        else:
            slopes = np.diff(ys) / np.diff(xs)
            if np.any(slopes < 0):
                issues.append(InvalidParameter("table decreasing"))
            if np.any(np.diff(slopes) > 1e-12):
                issues.append(InvalidParameter("table not concave"))
            if abs(slopes[0] - 1.0) > self.SLOPE_AT_ZERO_TOL:
                issues.append(InvalidParameter("slope at zero", float(slopes[0])))
        if issues:
            raise ValidationError(issues)
        self.xs = xs
        self.ys = ys
        self._last_slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])

    def __call__(self, a):
        a = np.asarray(a, dtype=float)
        out = np.interp(a, self.xs, self.ys)
        return np.where(a > self.xs[-1], self.ys[-1] + self._last_slope * (a - self.xs[-1]), out)

    def __repr__(self):
        return f"TabulatedImpact(xs={self.xs.tolist()}, ys={self.ys.tolist()})"


class PiecewisePolynomial:
    """Piecewise polynomial on [0, inf) with pieces closed on the right.

    ``breaks`` are the interior branch points; ``coeffs[k]`` holds ascending
    power coefficients of piece k, which covers ``(breaks[k-1], breaks[k]]``.
    """

    name = "piecewise"
    CONTINUITY_TOL = 1e-9

    def __init__(self, breaks: Sequence[float], coeffs: Sequence[Sequence[float]], check: bool = True):
        self.breaks = np.asarray(breaks, dtype=float)
        width = max(len(c) for c in coeffs)
        self.coeffs = np.zeros((len(coeffs), width))
        for k, c in enumerate(coeffs):
            self.coeffs[k, : len(c)] = c
        if len(coeffs) != self.breaks.size + 1:
            raise ValidationError([InvalidParameter("need len(breaks)+1 pieces", len(breaks), len(coeffs))])
        if np.any(np.diff(self.breaks) <= 0) or (self.breaks.size and self.breaks[0] <= 0):
            raise ValidationError([InvalidParameter("breaks must be positive and increasing")])
        if check:
            issues = self.continuity_issues()
            if issues:
                raise ValidationError(issues)

    def _piece(self, x):
        return np.searchsorted(self.breaks, x, side="left")

    @staticmethod
    def _horner(c, x):
        out = np.zeros_like(x)
        for k in range(c.shape[-1] - 1, -1, -1):
            out = out * x + c[..., k]
        return out

    def _dcoeffs(self):
        n = self.coeffs.shape[1]
        if n == 1:
            return np.zeros_like(self.coeffs)
        return self.coeffs[:, 1:] * np.arange(1, n)

    def piece_value(self, k: int, x, derivative: bool = False):
        c = self._dcoeffs()[k] if derivative else self.coeffs[k]
        return self._horner(c, np.asarray(x, dtype=float))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self._horner(self.coeffs[self._piece(x)], x)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        return self._horner(self._dcoeffs()[self._piece(x)], x)

    def continuity_issues(self) -> list[Exception]:
        issues: list[Exception] = []
        for k, b in enumerate(self.breaks):
            for deriv in (False, True):
                left = float(self.piece_value(k, b, deriv))
                right = float(self.piece_value(k + 1, b, deriv))
                if abs(left - right) > self.CONTINUITY_TOL:
                    what = "derivative" if deriv else "value"
                    issues.append(InvalidParameter(f"{what} jump at branch point", float(b), left, right))
        return issues

    def __repr__(self):
        return f"PiecewisePolynomial(breaks={self.breaks.tolist()}, coeffs={self.coeffs.tolist()})"


def identity_block() -> PiecewisePolynomial:
    blk = PiecewisePolynomial([], [[0.0, 1.0]])
    blk.name = "identity"
    return blk


def smoothed_block() -> PiecewisePolynomial:
    """Smoothed three-slope block liquidation curve (slopes 1, 0.8, 0.5)."""
    blk = PiecewisePolynomial(
        [5.0, 15.0, 40.0, 60.0],
        [
            [0.0, 1.0],
            [-0.25, 1.1, -0.01],
            [2.0, 0.8],  # 10 + 0.8 (x - 10)
            [-10.0, 1.4, -0.0075],
            [17.0, 0.5],  # 42 + 0.5 (x - 50)
        ],
    )
    blk.name = "smoothed"
    return blk


@dataclass(frozen=True)
class ImpactSpec:
    phi: object
    g: PiecewisePolynomial

    def phi_value(self, a):
        return self.phi(a)

    def shortfall(self, a):
        """a - phi(a), the revenue lost to temporary impact per unit price."""
        a = np.asarray(a, dtype=float)
        if isinstance(self.phi, LinearImpact):
            return np.zeros_like(a)
        return a - self.phi(a)


def eval_phi(impact: ImpactSpec, a):
    if np.any(np.asarray(a) < 0):
        raise NegativeRate(a)
    return impact.phi(a)


def eval_g(impact: ImpactSpec, x):
    if np.any(np.asarray(x) < 0):
        raise NegativeShares(x)
    return impact.g(x)


def eval_g_prime(impact: ImpactSpec, x):
    if np.any(np.asarray(x) < 0):
        raise NegativeShares(x)
    return impact.g.derivative(x)


def impact_issues(impact: ImpactSpec, upper: float = 200.0, n: int = 2001) -> list[Exception]:
    """Sampled checks of the structural assumptions on phi and g."""
    issues: list[Exception] = []
    a = np.linspace(0.0, upper, n)
    for label, f in (("phi", impact.phi), ("g", impact.g)):
        v = np.asarray(f(a), dtype=float)
        if v[0] != 0:
            issues.append(InvalidParameter(f"{label}(0) != 0", float(v[0])))
        if np.any(np.diff(v) < -1e-12):
            issues.append(InvalidParameter(f"{label} decreasing"))
        if np.any(v > a + 1e-9 * (1 + a)):
            issues.append(InvalidParameter(f"{label}(a) > a"))
        if np.any(np.diff(v, 2) > 1e-12 * (1 + np.abs(v[1:-1]))):
            issues.append(InvalidParameter(f"{label} not concave"))
    issues.extend(impact.g.continuity_issues())
    return issues


# ---------------------------------------------------------------------------
# Problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProblemSpec:
    model: CoefficientProvider
    generator: GeneratorMatrix
    impact: ImpactSpec
    beta: float = 0.01
    horizon: float = 1.0
    upsilon_max: float = 100.0
    control_quantum: float = 1.0
    x_max: float = 100.0
    s_min: float = math.exp(-1.0)
    s_max: float = math.exp(2.0)
    controls: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        issues: list[Exception] = []
        if not self.beta >= 0:
            issues.append(InvalidParameter("beta", self.beta))
        if not self.horizon > 0:
            issues.append(InvalidParameter("T", self.horizon))
        if not self.x_max > 0:
            issues.append(InvalidParameter("x_max", self.x_max))
        if not 0 < self.s_min < self.s_max:
            issues.append(InvalidParameter("price range", self.s_min, self.s_max))
        if not self.control_quantum > 0:
            issues.append(InvalidParameter("control_quantum", self.control_quantum))
        if not self.upsilon_max >= 0:
            issues.append(InvalidParameter("upsilon_max", self.upsilon_max))
        elif self.control_quantum > 0:
            k = self.upsilon_max / self.control_quantum
            if abs(k - round(k)) > 1e-9 * max(1.0, k):
                issues.append(InvalidParameter("upsilon_max not a multiple of control_quantum", self.upsilon_max))
        if self.model.m != self.generator.m:
            issues.append(InvalidParameter("regime count mismatch", self.model.m, self.generator.m))
        if issues:
            raise ValidationError(issues)
        n = int(round(self.upsilon_max / self.control_quantum))
        controls = np.arange(n + 1) * self.control_quantum
        controls.setflags(write=False)
        object.__setattr__(self, "controls", controls)

    @property
    def m(self) -> int:
        return self.generator.m


def base_problem(**overrides) -> ProblemSpec:
    """The two-regime numerical example: strong (0) and weak (1) markets."""
    kwargs = dict(
        model=PermanentImpactProvider(RegimeGbmParams((0.3, -0.1), (0.2, 0.4)), 0.0),
        generator=validate_generator([[-0.5, 0.5], [1.0, -1.0]]),
        impact=ImpactSpec(ExponentialImpact(0.005), smoothed_block()),
    )
    kwargs.update(overrides)
    return ProblemSpec(**kwargs)
