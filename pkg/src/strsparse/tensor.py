"""Dense tensor helpers used by the hand-written forward/backward passes.

Tensors are plain row-major ``numpy.ndarray`` objects (float64 unless a caller
asks otherwise).  This module adds the shape checks, the convolution kernels
and a portable JSON form on top of numpy.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

DEFAULT_DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def tensor(data, dtype=DEFAULT_DTYPE) -> np.ndarray:
    arr = np.array(data, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if 0 in arr.shape:
        raise DimensionError(f"all dimensions must be >= 1, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def _same_shape(x: np.ndarray, y: np.ndarray, op: str) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"{op}: shape mismatch {x.shape} vs {y.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    return a @ b


# -- elementwise suite -------------------------------------------------------

def sign(x: np.ndarray) -> np.ndarray:
    # numpy already maps 0 -> 0, which the soft threshold relies on
    return np.sign(x)


def absolute(x: np.ndarray) -> np.ndarray:
    return np.abs(x)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def hadamard(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _same_shape(x, y, "hadamard")
    return x * y


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _same_shape(x, y, "add")
    return x + y


def scale(x: np.ndarray, c: float) -> np.ndarray:
    return c * x


def sigmoid(x):
    """Overflow-free logistic function (works on scalars and arrays)."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def tanh(x):
    return np.tanh(x)


def exp(x):
    return np.exp(x)


def sum_reduce(x: np.ndarray, axes=None, keepdims: bool = False) -> np.ndarray:
    return np.sum(x, axis=axes, keepdims=keepdims)


# -- convolution ---------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(x_shape, k_shape, stride, padding, groups):
    if stride < 1 or padding < 0 or groups < 1:
        raise DimensionError(f"invalid stride/padding/groups: {stride}/{padding}/{groups}")
    _, c_in, h, w = x_shape
    c_out, c_per_group, kh, kw = k_shape
    if c_in % groups or c_out % groups:
        raise DimensionError(f"channels ({c_in} in, {c_out} out) not divisible by groups={groups}")
    if c_per_group != c_in // groups:
        raise DimensionError(
            f"kernel {k_shape} expects {c_per_group} input channels per group, "
            f"input {x_shape} with groups={groups} gives {c_in // groups}"
        )
    h_out = conv_output_size(h, kh, stride, padding)
    w_out = conv_output_size(w, kw, stride, padding)
    if h_out < 1 or w_out < 1:
        raise DimensionError(
            f"kernel {kh}x{kw} with stride {stride}, padding {padding} does not fit input {h}x{w}"
        )
    return h_out, w_out


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    # [N, C, H_out, W_out, kh, kw] view onto the padded input
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (h_out - 1) * stride + 1 : stride, : (w_out - 1) * stride + 1 : stride]


def _im2col(x, kernel_shape, stride, padding, groups):
    n, c_in, _, _ = x.shape
    c_out, cg, kh, kw = kernel_shape
    h_out, w_out = _check_conv(x.shape, kernel_shape, stride, padding, groups)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, kh, kw, stride, h_out, w_out)
    # -> [N, G, H_out*W_out, Cg*kh*kw]
    win = win.reshape(n, groups, cg, h_out, w_out, kh, kw)
    cols = win.transpose(0, 1, 3, 4, 2, 5, 6).reshape(n, groups, h_out * w_out, cg * kh * kw)
    return cols, h_out, w_out


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Cross-correlation of ``x`` ([C,H,W] or [N,C,H,W]) with ``kernel`` [C_out, C_in/groups, kh, kw].

    ``groups == C_in`` gives a depthwise convolution.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects [N,C,H,W]/[C,H,W] input and 4-d kernel, got {x.shape}, {kernel.shape}")
    n = x.shape[0]
    c_out, cg, kh, kw = kernel.shape
    cols, h_out, w_out = _im2col(x, kernel.shape, stride, padding, groups)
    kmat = kernel.reshape(groups, c_out // groups, cg * kh * kw).transpose(0, 2, 1)
    out = cols @ kmat  # [N, G, HW, Cout_g]
    out = out.transpose(0, 1, 3, 2).reshape(n, c_out, h_out, w_out)
    return out[0] if single else out


def conv2d_backward(x, kernel, grad_out, stride=1, padding=0, groups=1):
    """Gradients of ``sum(grad_out * conv2d(x, kernel))`` w.r.t. ``x`` and ``kernel``."""
    single = x.ndim == 3
    if single:
        x, grad_out = x[None], grad_out[None]
    n, c_in, h, w = x.shape
    c_out, cg, kh, kw = kernel.shape
    cols, h_out, w_out = _im2col(x, kernel.shape, stride, padding, groups)
    if grad_out.shape != (n, c_out, h_out, w_out):
        raise DimensionError(f"grad_out shape {grad_out.shape} != {(n, c_out, h_out, w_out)}")
    og = c_out // groups
    g = grad_out.reshape(n, groups, og, h_out * w_out)  # [N, G, Og, HW]

    # dK[g, o, k] = sum_n sum_p g[n,g,o,p] * cols[n,g,p,k]
    grad_k = np.matmul(g, cols).sum(axis=0).reshape(c_out, cg, kh, kw)

    kmat = kernel.reshape(groups, og, cg * kh * kw)
    gcols = np.matmul(g.transpose(0, 1, 3, 2), kmat)  # [N, G, HW, Cg*kh*kw]
    gcols = gcols.reshape(n, groups, h_out, w_out, cg, kh, kw).transpose(0, 1, 4, 5, 6, 2, 3)
    gcols = gcols.reshape(n, c_in, kh, kw, h_out, w_out)
    gxp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=np.result_type(x, kernel))
    for a in range(kh):
        for b in range(kw):
            gxp[:, :, a : a + stride * h_out : stride, b : b + stride * w_out : stride] += gcols[:, :, a, b]
    grad_x = gxp[:, :, padding : padding + h, padding : padding + w]
    grad_x = np.ascontiguousarray(grad_x)
    return (grad_x[0] if single else grad_x), grad_k


# -- serialization ---------------------------------------------------------------

def to_json_obj(x: np.ndarray) -> dict:
    return {"shape": list(x.shape), "data": [float(v) for v in np.ravel(x, order="C")]}


def from_json_obj(obj: dict, dtype=DEFAULT_DTYPE) -> np.ndarray:
    shape = [int(d) for d in obj["shape"]]
    data = np.asarray(obj["data"], dtype=dtype)
    if int(np.prod(shape)) != data.size:
        raise DimensionError(f"shape {shape} does not match {data.size} data values")
    if any(d < 1 for d in shape):
        raise DimensionError(f"all dimensions must be >= 1, got {shape}")
    return data.reshape(shape)


def save_json(x: np.ndarray, path) -> None:
    Path(path).write_text(json.dumps(to_json_obj(x)))


def load_json(path, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return from_json_obj(json.loads(Path(path).read_text()), dtype=dtype)
