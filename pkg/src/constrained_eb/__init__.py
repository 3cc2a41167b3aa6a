"""Constrained empirical Bayes denoising with optimal transport."""

from .bures import bures_distance_sq, psd_sqrt, psd_truncate, transport_map
from .gmodel import (
    DiscreteDistribution,
    PosteriorTable,
    SmoothPrior,
    bayes_denoise,
    build_grid,
    em_refine,
    fit_weights,
    npmle,
    posterior_table,
    prior_moments,
    smooth_npmle,
)
from .models import (
    AffineDenoiser,
    Dataset,
    GaussianHeteroscedastic,
    GaussianHomoscedastic,
    PoissonExposure,
    conjugate_vcb,
    estimate_noise_cov,
)

__version__ = "0.1.0"
