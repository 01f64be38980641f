"""STR-wrapped layers and small feed-forward models with manual backprop.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Parameter.grad`` during ``backward``.
Weighted layers hold the dense weight and recompute the sparse weight on each
forward pass.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import kernel as K
from .kernel import StrParam, ThresholdFn
from .params import Parameter, unique_parameters
from .pruning import magnitude_mask
from .tensor import DimensionError, conv2d, conv2d_backward, conv_output_size, from_json_obj, to_json_obj


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    name = ""

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        return []

    def output_shape(self, input_shape):
        return input_shape

    def __call__(self, x):
        return self.forward(x)


class _StrWeighted(Layer):
    """Shared plumbing for layers whose forward consumes ``S_g(W, s)``."""

    def __init__(self, weight: np.ndarray, str_param: StrParam | None, name: str):
        self.name = name
        self.weight = Parameter(weight, name=f"{name}.weight")
        self.str = str_param
        if str_param is not None:
            str_param.check(weight.shape)
        self._sparse = None
        # fixed magnitude budget (percent); recomputed from |W| on every forward
        self.budget_pct = None

    def effective_weight(self) -> np.ndarray:
        if self.budget_pct is not None:
            self._mask = magnitude_mask(self.weight.value, self.budget_pct)
            return self.weight.value * self._mask
        if self.str is None:
            return self.weight.value
        return K.str_forward(self.weight.value, self.str)

    def _accumulate(self, G: np.ndarray) -> None:
        """Route ``G = dL/dW_sparse`` into the dense weight and the threshold."""
        if self.budget_pct is not None:
            self.weight.grad += G * self._mask
            return
        if self.str is None:
            self.weight.grad += G
            return
        self.weight.grad += K.grad_w(G, self._sparse)
        if self.str.param.trainable:
            self.str.param.grad += K.grad_s(G, self.weight.value, self.str)

    def parameters(self):
        ps = [self.weight]
        if self.str is not None and self.str.param.trainable:
            ps.append(self.str.param)
        return ps


class StrLinear(_StrWeighted):
    """``y = x @ W_sparse.T`` with ``W`` stored as ``[out, in]`` (no bias)."""

    def __init__(self, in_features: int, out_features: int, str_param: StrParam | None = None,
                 rng: np.random.Generator | None = None, weight: np.ndarray | None = None, name: str = "linear"):
        if weight is None:
            rng = rng or np.random.default_rng(0)
            weight = kaiming_uniform(rng, (out_features, in_features), in_features)
        if weight.shape != (out_features, in_features):
            raise DimensionError(f"{name}: weight shape {weight.shape} != {(out_features, in_features)}")
        super().__init__(weight, str_param, name)
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"{self.name}: expected input [N, {self.in_features}], got {x.shape}")
        self._x = x
        self._sparse = self.effective_weight()
        return x @ self._sparse.T

    def backward(self, grad_out):
        self._accumulate(grad_out.T @ self._x)
        return grad_out @ self._sparse

    def output_shape(self, input_shape):
        return (self.out_features,)


class StrConv(_StrWeighted):
    """2-D convolution over ``[N, C, H, W]`` batches using the sparse kernel."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, groups: int = 1, str_param: StrParam | None = None,
                 rng: np.random.Generator | None = None, weight: np.ndarray | None = None, name: str = "conv"):
        if in_channels % groups or out_channels % groups:
            raise DimensionError(f"{name}: channels not divisible by groups={groups}")
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        if weight is None:
            rng = rng or np.random.default_rng(0)
            weight = kaiming_uniform(rng, shape, (in_channels // groups) * kernel_size * kernel_size)
        if weight.shape != shape:
            raise DimensionError(f"{name}: weight shape {weight.shape} != {shape}")
        super().__init__(weight, str_param, name)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding, self.groups = kernel_size, stride, padding, groups

    def forward(self, x):
        self._x = x
        self._sparse = self.effective_weight()
        return conv2d(x, self._sparse, self.stride, self.padding, self.groups)

    def backward(self, grad_out):
        gx, gk = conv2d_backward(self._x, self._sparse, grad_out, self.stride, self.padding, self.groups)
        self._accumulate(gk)
        return gx

    def output_shape(self, input_shape):
        c, h, w = input_shape
        return (self.out_channels,
                conv_output_size(h, self.kernel_size, self.stride, self.padding),
                conv_output_size(w, self.kernel_size, self.stride, self.padding))


class ChannelPrune(Layer):
    """Structured sparsity: scale filter ``i`` of ``inner`` by ``S_g(m_i, s)``.

    The inner layer keeps its own (usually absent) weight threshold; a zero
    importance removes the whole output channel.
    """

    def __init__(self, inner: _StrWeighted, importance: np.ndarray | None = None, str_param: StrParam | None = None,
                 s_init: float = -10.0, fn: ThresholdFn = K.EXPONENTIAL):
        n_out = inner.weight.value.shape[0]
        m = np.ones(n_out) if importance is None else np.asarray(importance, dtype=np.float64)
        if m.shape != (n_out,):
            raise DimensionError(f"importance vector has length {m.size}, layer has {n_out} output channels")
        self.inner = inner
        self.name = inner.name
        self.mask = Parameter(m, name=f"{inner.name}.importance")
        self.str = str_param or StrParam.init("per-weight", m.shape, s_init, fn, name=f"{inner.name}.s")
        self.str.check(m.shape)

    def scales(self) -> np.ndarray:
        return K.str_forward(self.mask.value, self.str)

    def _bshape(self):
        return (-1,) + (1,) * (self.inner.weight.value.ndim - 1)

    def effective_weight(self) -> np.ndarray:
        return self.scales().reshape(self._bshape()) * self.inner.effective_weight()

    def forward(self, x):
        inner = self.inner
        self._m_sparse = self.scales()
        self._w_sparse = inner.effective_weight()
        eff = self._m_sparse.reshape(self._bshape()) * self._w_sparse
        # run the inner op on the combined kernel, then split the gradient in backward
        inner._x = x
        inner._sparse = eff
        if isinstance(inner, StrConv):
            return conv2d(x, eff, inner.stride, inner.padding, inner.groups)
        return x @ eff.T

    def backward(self, grad_out):
        inner = self.inner
        x = inner._x
        if isinstance(inner, StrConv):
            gx, g_eff = conv2d_backward(x, inner._sparse, grad_out, inner.stride, inner.padding, inner.groups)
        else:
            g_eff = grad_out.T @ x
            gx = grad_out @ inner._sparse
        g_inner = g_eff * self._m_sparse.reshape(self._bshape())
        g_m = (g_eff * self._w_sparse).reshape(g_eff.shape[0], -1).sum(axis=1)
        inner._sparse = self._w_sparse
        inner._accumulate(g_inner)
        self.mask.grad += K.grad_w(g_m, self._m_sparse)
        if self.str.param.trainable:
            self.str.param.grad += K.grad_s(g_m, self.mask.value, self.str)
        return gx

    def parameters(self):
        ps = self.inner.parameters() + [self.mask]
        if self.str.param.trainable:
            ps.append(self.str.param)
        return ps

    def output_shape(self, input_shape):
        return self.inner.output_shape(input_shape)


class ReLU(Layer):
    name = "relu"

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad_out):
        return grad_out * self._mask


class Flatten(Layer):
    name = "flatten"

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._shape)

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


class GlobalAvgPool(Layer):
    name = "avgpool"

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad_out):
        n, c, h, w = self._shape
        return np.broadcast_to(grad_out[:, :, None, None] / (h * w), self._shape).copy()

    def output_shape(self, input_shape):
        return (input_shape[0],)


class Sequential:
    def __init__(self, layers, input_shape=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape) if input_shape is not None else None

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> list[Parameter]:
        return unique_parameters(p for layer in self.layers for p in layer.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def weighted_layers(self):
        return [l for l in self.layers if isinstance(l, (_StrWeighted, ChannelPrune))]

    def str_params(self):
        """(layer name, threshold) pairs, one per weighted layer (shared objects repeat)."""
        out = []
        for layer in self.weighted_layers():
            p = layer.str
            if p is not None:
                out.append((layer.name, p))
        return out

    def sparse_weights(self):
        """(layer name, effective sparse weight) in layer order."""
        return [(l.name, l.effective_weight()) for l in self.weighted_layers()]

    def overall_sparsity(self) -> float:
        ws = [w for _, w in self.sparse_weights()]
        total = sum(w.size for w in ws)
        return 1.0 - sum(K.nonzeros(w) for w in ws) / total

    def layer_sparsities(self) -> dict:
        return {name: K.sparsity(w) for name, w in self.sparse_weights()}


# -- losses ------------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    loss = -np.mean(np.log(probs[np.arange(n), labels] + 1e-300))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """``0.5 * mean over rows of ||pred - target||^2`` and its gradient."""
    diff = pred - target
    n = pred.shape[0]
    return float(0.5 * np.sum(diff * diff) / n), diff / n


# -- model builders -----------------------------------------------------------------

def _make_str(granularity, shape, s_init, fn, shared, name):
    if granularity is None or granularity == "dense":
        return None
    if granularity == "global":
        return shared
    return StrParam.init(granularity, shape, s_init, fn, name=name)


def build_mlp(sizes, granularity="per-layer", s_init=-5.0, fn: ThresholdFn = K.SIGMOID, seed=0,
              freeze_thresholds=False) -> Sequential:
    """Bias-free ReLU MLP with every linear layer wrapped by STR."""
    rng = np.random.default_rng(seed)
    shared = StrParam.init("global", (1,), s_init, fn, name="global.s") if granularity == "global" else None
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        name = f"fc{i + 1}"
        p = _make_str(granularity, (b, a), s_init, fn, shared, f"{name}.s")
        layers.append(StrLinear(a, b, p, rng=rng, name=name))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    model = Sequential(layers, input_shape=(sizes[0],))
    if freeze_thresholds:
        freeze(model)
    return model


def build_cnn(in_channels=1, image_size=16, channels=(8, 16), n_classes=4, granularity="per-layer",
              s_init=-5.0, fn: ThresholdFn = K.SIGMOID, seed=0, freeze_thresholds=False) -> Sequential:
    """Two 3x3 convs (the second strided) and a classifier, all STR-wrapped."""
    rng = np.random.default_rng(seed)
    shared = StrParam.init("global", (1,), s_init, fn, name="global.s") if granularity == "global" else None
    layers = []
    c_prev, size = in_channels, image_size
    for i, c in enumerate(channels):
        stride = 1 if i == 0 else 2
        name = f"conv{i + 1}"
        shape = (c, c_prev, 3, 3)
        p = _make_str(granularity, shape, s_init, fn, shared, f"{name}.s")
        layers += [StrConv(c_prev, c, 3, stride=stride, padding=1, str_param=p, rng=rng, name=name), ReLU()]
        size = conv_output_size(size, 3, stride, 1)
        c_prev = c
    layers.append(Flatten())
    feat = c_prev * size * size
    p = _make_str(granularity, (n_classes, feat), s_init, fn, shared, "fc.s")
    layers.append(StrLinear(feat, n_classes, p, rng=rng, name="fc"))
    model = Sequential(layers, input_shape=(in_channels, image_size, image_size))
    if freeze_thresholds:
        freeze(model)
    return model


def freeze(model: Sequential) -> None:
    for _, p in model.str_params():
        p.param.trainable = False


# -- checkpoints --------------------------------------------------------------------

def state_dict(model) -> dict:
    out = {}
    for layer in model.weighted_layers():
        base = layer.inner if isinstance(layer, ChannelPrune) else layer
        entry = {"W": to_json_obj(base.weight.value)}
        p = layer.str
        if p is not None:
            entry.update({"s": to_json_obj(p.s), "fn": {"kind": p.fn.kind, "k": p.fn.k},
                          "granularity": p.granularity})
        if isinstance(layer, ChannelPrune):
            entry["importance"] = to_json_obj(layer.mask.value)
        out[layer.name] = entry
    return out


def load_state_dict(model, state: dict) -> None:
    for layer in model.weighted_layers():
        if layer.name not in state:
            raise KeyError(f"checkpoint has no entry for layer {layer.name!r}")
        entry = state[layer.name]
        base = layer.inner if isinstance(layer, ChannelPrune) else layer
        W = from_json_obj(entry["W"])
        if W.shape != base.weight.value.shape:
            raise DimensionError(f"{layer.name}: checkpoint weight {W.shape} != model {base.weight.value.shape}")
        base.weight.value[...] = W
        if layer.str is not None and "s" in entry:
            layer.str.param.value[...] = from_json_obj(entry["s"]).reshape(layer.str.s.shape)
        if isinstance(layer, ChannelPrune) and "importance" in entry:
            layer.mask.value[...] = from_json_obj(entry["importance"])


def save_checkpoint(model, path) -> None:
    Path(path).write_text(json.dumps(state_dict(model), sort_keys=True))


def load_checkpoint(path) -> dict:
    return json.loads(Path(path).read_text())
