"""Effective dynamics of a reaction coordinate: conditional-expectation
coefficients, pathwise coupling with the full process, and a priori error
bounds."""

__version__ = "0.1.0"

from .bounds import BoundParams, BoundQuery, bound, fit_scaling, gronwall_bound, theorem_bound
from .config import ConfigError, ExperimentConfig, load_config, loads_config
from .coupled import PathwiseErrorReport, cosimulate, marginal_mse_experiment
from .effective import (
    EffectiveModel,
    ZGrid,
    estimate_effective,
    estimate_kappas,
    estimate_lipschitz,
    estimate_rho,
    frobenius_split,
    quadrature_oracle,
)
from .errors import EffdynError
from .geometry import frobenius_obstruction, level_set_frame, phi_matrix, projection_pi
from .model import ScalarField, SystemSpec, apply_generator, generator_xi
from .sampler import IntegratorConfig, simulate_fiber, simulate_full
from .systems import SYSTEMS, make_system

__all__ = [
    "BoundParams", "BoundQuery", "ConfigError", "EffdynError", "EffectiveModel", "ExperimentConfig",
    "IntegratorConfig", "PathwiseErrorReport", "SYSTEMS", "ScalarField", "SystemSpec", "ZGrid",
    "apply_generator", "bound", "cosimulate", "estimate_effective", "estimate_kappas",
    "estimate_lipschitz", "estimate_rho", "fit_scaling", "frobenius_obstruction", "frobenius_split",
    "generator_xi", "gronwall_bound", "level_set_frame", "load_config", "loads_config",
    "make_system", "marginal_mse_experiment", "phi_matrix", "projection_pi", "quadrature_oracle",
    "simulate_fiber", "simulate_full", "theorem_bound",
]
