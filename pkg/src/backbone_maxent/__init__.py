"""Maximum-entropy Gaussian models of protein backbone ensembles.

Conformations are described by internal coordinates (dihedrals and bond
angles).  A Gaussian over them is fitted so that the Cartesian fluctuations
it induces, to first order, match per-atom targets.
"""

from .constraint import (
    ConvergenceError, FitOptions, KappaPrior, PrecisionError, PrecisionModel, assemble_precision,
    build_prior, fit_lambda, fluctuation_sensitivity, induced_fluctuations, sample,
)
from .ensemble import EnsembleDataset, SingularCovarianceError, circular_mean, fit_baseline, sample_baseline
from .geometry import (
    BackboneChain, GeometryError, InternalCoords, KappaLayout, cartesian_to_internal,
    internal_to_cartesian, wrap_angle,
)
from .jacobian import GramSet, JacobianTable, compute_gram_set, compute_jacobian

__version__ = "0.1.0"

__all__ = [
    "BackboneChain", "ConvergenceError", "EnsembleDataset", "FitOptions", "GeometryError",
    "GramSet", "InternalCoords", "JacobianTable", "KappaLayout", "KappaPrior", "PrecisionError",
    "PrecisionModel", "SingularCovarianceError", "assemble_precision", "build_prior",
    "cartesian_to_internal", "circular_mean", "compute_gram_set", "compute_jacobian",
    "fit_baseline", "fit_lambda", "fluctuation_sensitivity", "induced_fluctuations",
    "internal_to_cartesian", "sample", "sample_baseline", "wrap_angle",
]
