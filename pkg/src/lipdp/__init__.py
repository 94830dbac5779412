"""Differentially private training of feed-forward networks with weight clipping
and analytic per-layer gradient sensitivity, next to per-sample gradient clipping."""

from .accountant import PrivacySpend, RdpLedger, gaussian_sigma_for, rdp_step, to_epsilon_delta
from .dp_optim import TrainConfig, clip_weights, dp_sgd_step, lip_dp_sgd_step, poisson_sample, train
from .layers import (
    Activation,
    Conv2D,
    CosineSimilarity,
    Dense,
    GroupNorm,
    ModelSpec,
    MulticlassHinge,
    SoftmaxCE,
    SquaredError,
)
from .sensitivity import SensitivityReport, layer_sensitivity
from .tensor import frobenius_norm, gaussian_noise, make_rng, spectral_norm

__version__ = "0.1.0"
