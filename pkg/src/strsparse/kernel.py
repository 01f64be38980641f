"""Soft-threshold reparameterization: forward map, sub-gradients and thresholds.

A dense weight ``W`` is never modified by the forward pass; the layer consumes
``W_sparse = sign(W) * relu(|W| - g(s))`` where ``s`` is a trainable threshold
parameter and ``g`` a positive increasing function.  Weights with ``|w| <= g(s)``
are exactly zero, and the same strict indicator ``|w| > g(s)`` is used by both
backward rules so the kink is handled consistently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .params import Parameter
from .tensor import DimensionError

GRANULARITIES = ("global", "per-layer", "per-channel", "per-weight")

# below this, e^{-s} overflows and the sigmoid would return denormals
_SIGMOID_FLOOR = -745.0


@dataclass(frozen=True)
class ThresholdFn:
    kind: str = "sigmoid"
    k: float = 1.0

    def __post_init__(self):
        if self.kind not in ("sigmoid", "exponential"):
            raise ValueError(f"unknown threshold function {self.kind!r}")
        if not self.k > 0:
            raise ValueError(f"scale k must be positive, got {self.k}")

    def __call__(self, s):
        return g_eval(self, s)

    def prime(self, s):
        return g_prime(self, s)


SIGMOID = ThresholdFn("sigmoid", 1.0)
EXPONENTIAL = ThresholdFn("exponential", 1.0)


def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.zeros_like(s)
    live = s >= _SIGMOID_FLOOR
    z = s[live]
    pos = z >= 0
    val = np.empty_like(z)
    val[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    val[~pos] = ez / (1.0 + ez)
    out[live] = val
    return out


def g_eval(fn: ThresholdFn, s):
    """Threshold ``alpha = g(s)``; scalar in, float out, array in, array out."""
    arr = np.asarray(s, dtype=np.float64)
    if fn.kind == "sigmoid":
        out = fn.k * _sigmoid(np.atleast_1d(arr)).reshape(arr.shape)
    else:
        with np.errstate(over="ignore"):
            out = fn.k * np.exp(arr)
    return float(out) if np.ndim(s) == 0 else out


def g_prime(fn: ThresholdFn, s):
    arr = np.asarray(s, dtype=np.float64)
    g = np.asarray(g_eval(fn, arr))
    if fn.kind == "sigmoid":
        out = g * (fn.k - g) / fn.k
    else:
        out = g
    return float(out) if np.ndim(s) == 0 else out


def soft_threshold(w, alpha):
    """``sign(w) * max(|w| - alpha, 0)``, elementwise; zero exactly when ``|w| <= alpha``."""
    if np.any(np.asarray(alpha) < 0):
        raise ValueError("threshold must be non-negative")
    out = np.sign(w) * np.maximum(np.abs(w) - alpha, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def hard_threshold(w, alpha):
    """Keep ``w`` where ``|w| > alpha``, zero elsewhere (discontinuous at ``|w| = alpha``)."""
    w = np.asarray(w, dtype=np.float64)
    out = np.where(np.abs(w) > alpha, w, 0.0)
    return float(out) if np.ndim(out) == 0 else out


class StrParam:
    """Threshold parameter ``s`` for one weight tensor (or shared across several).

    Granularity decides the shape of ``s``:

    * ``global`` / ``per-layer``: shape ``(1,)``; a global instance is simply
      the same object handed to every layer.
    * ``per-channel``: one entry per output channel (axis 0 of the weight).
    * ``per-weight``: same shape as the weight.
    """

    def __init__(self, granularity: str, s, fn: ThresholdFn = SIGMOID, name: str = "s",
                 trainable: bool = True):
        if granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
        s = np.array(s, dtype=np.float64)
        if granularity in ("global", "per-layer"):
            if s.size != 1:
                raise DimensionError(f"{granularity} threshold must be a scalar, got shape {s.shape}")
            s = s.reshape(1)
        elif granularity == "per-channel" and s.ndim != 1:
            raise DimensionError(f"per-channel threshold must be a vector, got shape {s.shape}")
        self.granularity = granularity
        self.fn = fn
        self.param = Parameter(s, name=name, decay=True, trainable=trainable)

    @classmethod
    def init(cls, granularity: str, weight_shape, s_init: float, fn: ThresholdFn = SIGMOID, **kw):
        if granularity == "per-channel":
            s = np.full(weight_shape[0], s_init)
        elif granularity == "per-weight":
            s = np.full(weight_shape, s_init)
        else:
            s = np.full(1, s_init)
        return cls(granularity, s, fn, **kw)

    @property
    def s(self) -> np.ndarray:
        return self.param.value

    def check(self, weight_shape) -> None:
        if self.granularity == "per-channel" and self.s.shape != (weight_shape[0],):
            raise DimensionError(
                f"per-channel threshold has {self.s.size} entries, weight has {weight_shape[0]} output channels"
            )
        if self.granularity == "per-weight" and self.s.shape != tuple(weight_shape):
            raise DimensionError(f"per-weight threshold shape {self.s.shape} != weight shape {tuple(weight_shape)}")

    def _broadcast(self, values: np.ndarray, ndim: int) -> np.ndarray:
        if self.granularity in ("global", "per-layer"):
            return values.reshape(())
        if self.granularity == "per-channel":
            return values.reshape((-1,) + (1,) * (ndim - 1))
        return values

    def alpha(self) -> np.ndarray:
        """Threshold value(s) in the shape of ``s``."""
        return np.asarray(g_eval(self.fn, self.s)).reshape(self.s.shape)

    def alpha_for(self, weight_shape) -> np.ndarray:
        self.check(weight_shape)
        return self._broadcast(self.alpha(), len(weight_shape))

    def __repr__(self) -> str:
        return f"StrParam({self.granularity}, fn={self.fn.kind}/k={self.fn.k}, s={self.s.tolist() if self.s.size < 6 else self.s.shape})"


def str_forward(W: np.ndarray, p: StrParam) -> np.ndarray:
    return soft_threshold(W, p.alpha_for(W.shape))


def support(W: np.ndarray, p: StrParam) -> np.ndarray:
    """Boolean mask of surviving weights, ``|W| > g(s)``."""
    return np.abs(W) > p.alpha_for(W.shape)


def grad_w(G: np.ndarray, W_sparse: np.ndarray) -> np.ndarray:
    """Sub-gradient w.r.t. the dense weight: ``G`` masked by the nonzeros of ``W_sparse``."""
    if G.shape != W_sparse.shape:
        raise DimensionError(f"grad_w: shape mismatch {G.shape} vs {W_sparse.shape}")
    return G * (W_sparse != 0)


def grad_s(G: np.ndarray, W: np.ndarray, p: StrParam) -> np.ndarray:
    """Gradient w.r.t. ``s`` for one weight tensor, shaped like ``p.s``.

    Equals ``-g'(s) * <G, sign(W) * 1{|W| > g(s)}>`` reduced over each entry's
    scope (whole tensor, one output channel, or a single weight).  Global
    thresholds receive the sum of these over all layers sharing them.
    """
    if G.shape != W.shape:
        raise DimensionError(f"grad_s: shape mismatch {G.shape} vs {W.shape}")
    contrib = G * np.sign(W) * support(W, p)
    if p.granularity in ("global", "per-layer"):
        inner = np.array([contrib.sum()])
    elif p.granularity == "per-channel":
        inner = contrib.reshape(W.shape[0], -1).sum(axis=1)
    else:
        inner = contrib
    return -np.asarray(g_prime(p.fn, p.s)).reshape(p.s.shape) * inner


def sparsity(W) -> float:
    W = np.asarray(W)
    return float(np.count_nonzero(W == 0)) / W.size


def nonzeros(W) -> int:
    return int(np.count_nonzero(W))


def threshold_summary(p: StrParam) -> float:
    """One number per threshold parameter for logging (mean alpha for vector thresholds)."""
    a = p.alpha()
    return float(a.reshape(-1)[0]) if a.size == 1 else float(np.mean(a))


def s_for_alpha(fn: ThresholdFn, alpha: float) -> float:
    """Inverse of ``g`` (handy for setting thresholds in tests and CLIs)."""
    if fn.kind == "sigmoid":
        if not 0 < alpha < fn.k:
            raise ValueError(f"sigmoid threshold must lie in (0, {fn.k})")
        r = alpha / fn.k
        return math.log(r / (1 - r))
    if alpha <= 0:
        raise ValueError("exponential threshold must be positive")
    return math.log(alpha / fn.k)
