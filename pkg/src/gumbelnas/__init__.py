"""Gumbel-softmax gradient estimators and a small fusion architecture search."""

from .autodiff import AutodiffError, Graph, gradcheck
from .estimators import (
    ESTIMATORS,
    conditional_gumbel_sample,
    exact_expectation_gradient,
    grmc_estimate,
    gs_estimate,
    gumbel_softmax,
    sample_gumbel,
    stgs_estimate,
)
from .seeding import derive_rng, derive_seed

__version__ = "0.1.0"
