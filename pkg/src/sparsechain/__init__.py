"""Disordered chains with sparse interactions: localization, splittings and current correlations."""

__version__ = "0.1.0"

from .disorder import DisorderRealization, DisorderSpec, OmegaLaw, condition_zero_stretch, sample_disorder
from .anderson import AndersonOperator, EigenBasis, build_operator, eigendecompose, localization_profile
from .classical_chain import ChainParams, PhaseState, gibbs_sample, verlet_evolve
from .splitting import mode_energy, residuals, splitting_coefficients
from .griffiths import compute_G, compute_G0, gap_tail, nearest_in_G, predict_exponent
from .correlation import CorrelationSeries, estimate_C_classical, fit_exponent
from .fermion import QuantumParams, ed_build, free_current_correlation

__all__ = [
    "AndersonOperator", "ChainParams", "CorrelationSeries", "DisorderRealization", "DisorderSpec",
    "EigenBasis", "OmegaLaw", "PhaseState", "QuantumParams", "build_operator", "compute_G",
    "compute_G0", "condition_zero_stretch", "ed_build", "eigendecompose", "estimate_C_classical",
    "fit_exponent", "free_current_correlation", "gap_tail", "gibbs_sample", "localization_profile",
    "mode_energy", "nearest_in_G", "predict_exponent", "residuals", "sample_disorder",
    "splitting_coefficients", "verlet_evolve",
]
