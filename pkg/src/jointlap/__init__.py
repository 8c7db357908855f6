"""Joint models of multivariate longitudinal markers and competing risks
fitted with nested Laplace approximations."""

from .augment import ingest, partition_time, poisson_augment
from .infer import FitResult, fit, sample_joint_posterior
from .lgm import assemble
from .modelspec import ModelSpec, validate

__version__ = "0.1.0"

__all__ = [
    "FitResult",
    "ModelSpec",
    "assemble",
    "fit",
    "ingest",
    "partition_time",
    "poisson_augment",
    "sample_joint_posterior",
    "validate",
]
