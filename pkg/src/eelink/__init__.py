"""Bayesian-bootstrap posteriors for estimating equations with a nuisance parameter."""

from .engines import (
    EngineConfig,
    PluginMethod,
    bb_posterior_augmented,
    bb_posterior_known_h,
    bb_posterior_linked,
    bb_posterior_plugin,
    llb_posterior,
)
from .errors import (
    DataValidationError,
    DrawFailed,
    EELinkError,
    NotIdentified,
    OverlapViolation,
    ReplicateFailed,
    SingularJacobian,
    SolverDiverged,
    SolverError,
    StudyFailure,
)
from .estimators import fit_logistic_weighted, solve_weighted_ee
from .model import Dataset, EstimandSpec, PosteriorDraws, WeightVector, read_dataset_csv, validate_dataset
from .rng import Purpose, StreamKey, derive_stream, dirichlet_weights, equal_weights
from .sandwich import SandwichEstimate, sandwich_augmented, sandwich_linked
from .scores import make_spec
from .study import StudyConfig, emit_table, run_replicate, run_study, summarize_posterior

__version__ = "0.1.0"
