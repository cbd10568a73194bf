"""Sparse variational GPSSM: model containers, smoother, updates and training."""

from .model import GpssmModel, LinearGaussianMeasurement, NaturalParams, ParticleCloud
from .smoother import particle_smoother, systematic_resample
from .training import TrainConfig, TrainResult, fit_gpssm, navigate, select_inducing, train
from .variational import (ElboTerms, Gaussian, elbo_hyper_gradient, elbo_terms,
                          gaussian_kl, predictive_factors, update_natural_params)

__all__ = ["GpssmModel", "LinearGaussianMeasurement", "NaturalParams", "ParticleCloud",
           "particle_smoother", "systematic_resample", "TrainConfig", "TrainResult",
           "fit_gpssm", "navigate", "select_inducing", "train", "ElboTerms", "Gaussian",
           "elbo_hyper_gradient", "elbo_terms", "gaussian_kl", "predictive_factors",
           "update_natural_params"]
