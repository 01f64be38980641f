from __future__ import annotations

import math

import numpy as np


def keep_count(size: int, sparsity_pct: float) -> int:
    """Number of weights kept at ``sparsity_pct`` (round half up)."""
    return int(math.floor(size * (100.0 - sparsity_pct) / 100.0 + 0.5))


def magnitude_mask(W: np.ndarray, sparsity_pct: float) -> np.ndarray:
    """Boolean mask of the top-k entries by ``|w|``; ties keep the lowest flat index."""
    if not 0.0 <= sparsity_pct <= 100.0:
        raise ValueError(f"sparsity {sparsity_pct} outside [0, 100]")
    flat = np.abs(np.ravel(W))
    k = keep_count(flat.size, sparsity_pct)
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(np.shape(W))


def magnitude_prune_to_budget(W: np.ndarray, sparsity_pct: float) -> np.ndarray:
    return np.where(magnitude_mask(W, sparsity_pct), W, 0.0)
