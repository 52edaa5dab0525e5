"""Optimal liquidation under Markov regime switching."""

from .grid import GridSpec, StabilityReport, build_grid, check_stability
from .hamiltonian import GradientSample, optimize_control, optimize_control_closed_form
from .model import (ExponentialImpact, GbmProvider, GeneratorMatrix, ImpactSpec, LinearImpact,
                    PermanentImpactProvider, PiecewisePolynomial, ProblemSpec, RegimeGbmParams, TabulatedImpact,
                    eval_g, eval_g_prime, eval_phi, identity_block, smoothed_block, base_problem, validate_generator)
from .simulate import ConstantPolicy, SimResult, evaluate_policy, sample_regime_path, simulate_path
from .solver import PolicyField, Solution, ValueField, convergence_study, extract_policy_slice, solve

__version__ = "0.1.0"
