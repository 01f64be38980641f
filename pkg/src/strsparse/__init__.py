"""Learnable sparsity through soft-threshold weight reparameterization."""

from .kernel import (
    EXPONENTIAL,
    SIGMOID,
    StrParam,
    ThresholdFn,
    g_eval,
    g_prime,
    grad_s,
    grad_w,
    hard_threshold,
    soft_threshold,
    sparsity,
    str_forward,
)
from .optim import TrainConfig, TrainReport, cosine_lr, sgd_step, train

__version__ = "0.1.0"
