"""Linear-quadratic mean field games with common noise on Galerkin-truncated models."""

from .consistency import (ContractionCertificate, DecoupledSolution, FixedPointResult, MeanFieldCandidate,
                          ResidualReport, contraction_certificate, fbsee_residual, picard_fixed_point,
                          solve_decoupled)
from .model import ModelSpec, TimeGrid, build_semigroup, validate_model
from .noise import NoiseTree, build_noise_tree, sample_q_wiener
from .riccati import (RiccatiSolution, compute_lambda, solve_eta_riccati, solve_pi_riccati,
                      solve_r_riccati)
from .simulate import (average_state_error_experiment, epsilon_nash_experiment, estimate_cost,
                       simulate_n_player)

__all__ = [
    "ContractionCertificate", "DecoupledSolution", "FixedPointResult", "MeanFieldCandidate", "ModelSpec",
    "NoiseTree", "ResidualReport", "RiccatiSolution", "TimeGrid", "average_state_error_experiment",
    "build_noise_tree", "build_semigroup", "compute_lambda", "contraction_certificate",
    "epsilon_nash_experiment", "estimate_cost", "fbsee_residual", "picard_fixed_point", "sample_q_wiener",
    "simulate_n_player", "solve_decoupled", "solve_eta_riccati", "solve_pi_riccati", "solve_r_riccati",
    "validate_model",
]
