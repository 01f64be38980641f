from __future__ import annotations

import numpy as np


class Parameter:
    """A trainable array with its gradient accumulator.

    ``decay`` marks whether the optimizer's weight decay applies; ``trainable``
    lets callers freeze a parameter (e.g. thresholds pinned at zero).
    """

    def __init__(self, value, name: str = "", decay: bool = True, trainable: bool = True):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.decay = decay
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def unique_parameters(params):
    """Drop repeated objects (shared global thresholds) while keeping order."""
    seen = set()
    out = []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out
