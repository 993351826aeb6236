"""Representation alignment toolkit: kernel-alignment metrics, PMI-kernel
worlds with contrastive learners, and a colour cooccurrence pipeline."""

from .core import (
    AlignmentError,
    AlignmentScore,
    FeatureMatrix,
    GramKernel,
    NumericalError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "AlignmentScore",
    "FeatureMatrix",
    "GramKernel",
    "NumericalError",
    "ValidationError",
]
