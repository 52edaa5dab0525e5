"""Pointwise maximisation of the control-dependent part of the HJB operator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ProblemSpec


@dataclass(frozen=True)
class GradientSample:
    """Finite-difference derivatives of W at one grid point.

    ``p`` is dW/dx, ``qz`` is dW/dz and ``mzz`` is d2W/dz2.
    """

    p: float
    qz: float
    mzz: float
    t: float
    s: float
    regime: int

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"price must be positive, got {self.s}")


def control_objective(sample: GradientSample, spec: ProblemSpec) -> tuple[np.ndarray, float]:
    """-u p + mu q + sigma^2 M / 2 + phi(u) s over the control set, in price coordinates.

    Returned as ``(variable, constant)``: the part that depends on the
    control and a scalar that does not (zero for control-dependent models).
    """
    u = spec.controls
    s = sample.s
    # u (s - p) - (u - phi(u)) s keeps the linear-impact case exactly linear in u
    variable = u * (s - sample.p) - spec.impact.shortfall(u) * s
    q = sample.qz / s
    m = (sample.mzz - sample.qz) / (s * s)
    if spec.model.control_dependent:
        drift, diff = spec.model.coefficients(sample.t, s, u, sample.regime)
        variable = variable + drift * q + 0.5 * np.asarray(diff) ** 2 * m
        return variable, 0.0
    drift, diff = spec.model.coefficients(sample.t, s, 0.0, sample.regime)
    return variable, float(drift * q + 0.5 * diff * diff * m)


def optimize_control(sample: GradientSample, spec: ProblemSpec) -> tuple[float, float]:
    """Grid search over {0, du, ..., u_max}; ties go to the smallest rate."""
    variable, constant = control_objective(sample, spec)
    k = int(np.argmax(variable))
    return float(spec.controls[k]), float(variable[k] + constant)


def optimize_control_closed_form(p: float, s: float, alpha: float, upsilon_max: float) -> float:
    """Maximiser of -u p + (1 - exp(-alpha u)) s / alpha on [0, upsilon_max]."""
    if p <= 0:
        return float(upsilon_max)
    return float(min(max(math.log(s / p) / alpha, 0.0), upsilon_max))
