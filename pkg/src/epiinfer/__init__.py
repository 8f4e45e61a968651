"""Simulation and parametric inference for stochastic epidemic models."""

from .models import (
    ModelSpec,
    Theta,
    build_model,
    diffusion_factor,
    diffusion_matrix,
    drift,
    drift_gradients,
    q_rates,
)
from .ode import OdeSolution, resolvent, sensitivities, solve_ode
from .results import EstimateResult, chi2_quantile, confidence_ellipsoid
from .rng import SeedSpec, make_rng
from .simulate import (
    JumpPath,
    SampledSeries,
    euler_maruyama,
    gillespie,
    non_extinct_filter,
    sample_path,
    simulate_ar1,
    tau_leap,
)

__all__ = [
    "ModelSpec",
    "Theta",
    "build_model",
    "drift",
    "diffusion_matrix",
    "diffusion_factor",
    "drift_gradients",
    "q_rates",
    "OdeSolution",
    "solve_ode",
    "sensitivities",
    "resolvent",
    "EstimateResult",
    "confidence_ellipsoid",
    "chi2_quantile",
    "SeedSpec",
    "make_rng",
    "JumpPath",
    "SampledSeries",
    "gillespie",
    "tau_leap",
    "sample_path",
    "euler_maruyama",
    "simulate_ar1",
    "non_extinct_filter",
]

__version__ = "0.1.0"
