"""Stochastic expectation propagation and its EP-family relatives.

Gaussian approximate inference for probit regression and mixtures of
Gaussians by EP, ADF, SEP, parallel SEP, distributed SEP and latent SEP,
plus MCMC and grid reference posteriors to measure them against.
"""

__version__ = "0.1.0"

from .expfam import (  # noqa: E402
    CategoricalDist,
    GaussianMoment,
    GaussianNatural,
    factor_divide,
    factor_multiply,
    factor_power,
    kl_gaussian,
    to_moments,
    to_natural,
)
from .inference import ApproxState, DampingSchedule, RunConfig, RunTrace, run  # noqa: E402
from .likelihoods import MoGModel, ProbitLikelihood, MixtureLikelihood  # noqa: E402

__all__ = [
    "ApproxState",
    "CategoricalDist",
    "DampingSchedule",
    "GaussianMoment",
    "GaussianNatural",
    "MixtureLikelihood",
    "MoGModel",
    "ProbitLikelihood",
    "RunConfig",
    "RunTrace",
    "factor_divide",
    "factor_multiply",
    "factor_power",
    "kl_gaussian",
    "run",
    "to_moments",
    "to_natural",
]
