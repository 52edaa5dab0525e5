"""Strict ``section.key = value`` run configuration.

Lines are either ``[section]`` headers, ``key = value`` pairs (qualified by
the current header) or fully dotted ``section.key = value`` pairs. ``#``
starts a comment. Lists are comma separated, matrix rows are separated by
``;``, and any float may be written ``exp(<float>)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Any

from .model import (ExponentialImpact, ImpactSpec, InvalidParameter, LinearImpact, ModelError,
                    PermanentImpactProvider, PiecewisePolynomial, ProblemSpec, RegimeGbmParams, TabulatedImpact,
                    ValidationError, identity_block, smoothed_block, validate_generator)


class UnknownKey(ModelError):
    pass


class MissingKey(ModelError):
    pass


class InvalidValue(ModelError):
    pass


class ConfigError(ValidationError):
    pass


_EXP = re.compile(r"^exp\(\s*([^()]+?)\s*\)$")


def _float(text: str) -> float:
    m = _EXP.match(text.strip())
    if m:
        return math.exp(float(m.group(1)))
    return float(text)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(_float(v) for v in text.split(",") if v.strip())


def _matrix(text: str) -> tuple[tuple[float, ...], ...]:
    return tuple(_floats(row) for row in text.split(";") if row.strip())


def _auto_int(text: str):
    return "auto" if text.strip() == "auto" else int(text)


def _auto_float(text: str):
    return "auto" if text.strip() == "auto" else _float(text)


def _choice(*options):
    def parse(text: str) -> str:
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {options}")
        return text
    return parse


REQUIRED = object()
OPTIONAL = object()

# key -> (parser, default); REQUIRED keys must appear, OPTIONAL keys depend on other choices
SCHEMA: dict[str, tuple[Any, Any]] = {
    "model.mu": (_floats, REQUIRED),
    "model.sigma": (_floats, REQUIRED),
    "model.generator": (_matrix, REQUIRED),
    "model.regimes": (int, REQUIRED),
    "model.lambda": (_float, REQUIRED),
    "impact.phi": (_choice("linear", "exponential", "tabulated"), REQUIRED),
    "impact.alpha": (_float, OPTIONAL),
    "impact.phi_x": (_floats, OPTIONAL),
    "impact.phi_y": (_floats, OPTIONAL),
    "impact.g": (_choice("identity", "smoothed", "piecewise"), REQUIRED),
    "impact.g_breaks": (_floats, OPTIONAL),
    "impact.g_coeffs": (_matrix, OPTIONAL),
    "problem.beta": (_float, REQUIRED),
    "problem.T": (_float, REQUIRED),
    "problem.upsilon_max": (_float, REQUIRED),
    "problem.control_quantum": (_float, REQUIRED),
    "problem.x_max": (_float, REQUIRED),
    "problem.s_min": (_float, REQUIRED),
    "problem.s_max": (_float, REQUIRED),
    "grid.n_x": (int, 100),
    "grid.n_z": (int, 60),
    "grid.n_tau": (_auto_int, "auto"),
    "grid.scheme": (_choice("upwind", "central"), "upwind"),
    "simulate.n_paths": (int, 100_000),
    "simulate.dt": (_auto_float, "auto"),
    "simulate.seed": (int, 20240601),
    "simulate.x0": (_float, 50.0),
    "simulate.s0": (_float, 1.0),
    "simulate.regime0": (int, 1),
    "output.directory": (str.strip, "out"),
    "output.slices": (_floats, (0.0,)),
}

_CONDITIONAL = {
    "impact.alpha": ("impact.phi", "exponential"),
    "impact.phi_x": ("impact.phi", "tabulated"),
    "impact.phi_y": ("impact.phi", "tabulated"),
    "impact.g_breaks": ("impact.g", "piecewise"),
    "impact.g_coeffs": ("impact.g", "piecewise"),
}


@dataclass(frozen=True)
class RunConfig:
    values: tuple[tuple[str, Any], ...]

    def __getitem__(self, key: str):
        return dict(self.values)[key]

    def get(self, key: str, default=None):
        return dict(self.values).get(key, default)

    def problem(self) -> ProblemSpec:
        return build_problem(dict(self.values))

    def echo(self) -> str:
        """Resolved configuration text; re-parses to an equal RunConfig."""
        lines = ["# resolved configuration"]
        for key, value in self.values:
            lines.append(f"{key} = {_render(value)}")
        return "\n".join(lines) + "\n"


def _render(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(_render(row) for row in value)
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def _build_phi(v: dict):
    kind = v["impact.phi"]
    if kind == "linear":
        return LinearImpact()
    if kind == "exponential":
        return ExponentialImpact(v["impact.alpha"])
    return TabulatedImpact(v["impact.phi_x"], v["impact.phi_y"])


def _build_g(v: dict):
    kind = v["impact.g"]
    if kind == "identity":
        return identity_block()
    if kind == "smoothed":
        return smoothed_block()
    return PiecewisePolynomial(v["impact.g_breaks"], v["impact.g_coeffs"])


def build_problem(v: dict) -> ProblemSpec:
    issues: list[Exception] = []
    m = v["model.regimes"]
    for key in ("model.mu", "model.sigma", "model.generator"):
        if len(v[key]) != m:
            issues.append(InvalidParameter(f"{key} must have {m} entries", len(v[key])))
    parts = {}
    for name, build in (("generator", lambda: validate_generator(v["model.generator"])),
                        ("model", lambda: PermanentImpactProvider(RegimeGbmParams(v["model.mu"], v["model.sigma"]),
                                                                  v["model.lambda"])),
                        ("phi", lambda: _build_phi(v)),
                        ("g", lambda: _build_g(v))):
        try:
            parts[name] = build()
        except ValidationError as exc:
            issues.extend(exc.issues)
    if issues:
        raise ConfigError(issues)
    try:
        return ProblemSpec(model=parts["model"], generator=parts["generator"],
                           impact=ImpactSpec(parts["phi"], parts["g"]),
                           beta=v["problem.beta"], horizon=v["problem.T"], upsilon_max=v["problem.upsilon_max"],
                           control_quantum=v["problem.control_quantum"], x_max=v["problem.x_max"],
                           s_min=v["problem.s_min"], s_max=v["problem.s_max"])
    except ValidationError as exc:
        raise ConfigError(exc.issues) from None


def parse_config(text: str) -> RunConfig:
    raw: dict[str, str] = {}
    issues: list[Exception] = []
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            issues.append(InvalidValue(f"line {lineno}", line))
            continue
        key, value = (p.strip() for p in line.split("=", 1))
        if "." not in key and section:
            key = f"{section}.{key}"
        if key not in SCHEMA:
            issues.append(UnknownKey(key))
            continue
        if key in raw:
            issues.append(InvalidValue(key, "duplicate"))
        raw[key] = value

    values: dict[str, Any] = {}
    for key, (parse, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = parse(raw[key])
            except ValueError as exc:
                issues.append(InvalidValue(key, raw[key], str(exc)))
        elif default is REQUIRED:
            issues.append(MissingKey(key))
        elif default is not OPTIONAL:
            values[key] = default
    for key, (owner, wanted) in _CONDITIONAL.items():
        if owner not in values:
            continue
        if values[owner] == wanted and key not in raw:
            issues.append(MissingKey(key))
        elif values[owner] != wanted and key in raw:
            issues.append(UnknownKey(key))
    if issues:
        raise ConfigError(issues)
    cfg = RunConfig(tuple((k, values[k]) for k in SCHEMA if k in values))
    cfg.problem()
    r0 = values["simulate.regime0"]
    if not 1 <= r0 <= values["model.regimes"]:
        raise ConfigError([InvalidParameter("simulate.regime0", r0)])
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
