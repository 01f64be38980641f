"""Independent reference computations used by the tests.

Nothing here calls into the package's gradient or optimizer code: gradients
come from central differences and the dense trainer is written out by hand.
"""

import math

import numpy as np

from strsparse import kernel as K
from strsparse.kernel import StrParam, ThresholdFn
from strsparse.layers import ChannelPrune, StrConv, StrLinear

FD_STEP = 1e-6


def central_difference(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """dF/dx for scalar ``f()`` by perturbing ``x`` in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


# -- random STR layer instances with a margin between |w| and alpha -----------------

MARGIN = 1e-3


def random_threshold(rng, granularity, weight_shape, fn: ThresholdFn) -> StrParam:
    if granularity in ("global", "per-layer"):
        shape = (1,)
    elif granularity == "per-channel":
        shape = (weight_shape[0],)
    else:
        shape = weight_shape
    alpha = rng.uniform(0.05, 0.8, size=shape)
    s = np.vectorize(lambda a: K.s_for_alpha(fn, a))(alpha)
    return StrParam(granularity, s, fn)


def margin_ok(values: np.ndarray, p: StrParam) -> bool:
    return float(np.min(np.abs(np.abs(values) - p.alpha_for(values.shape)))) > MARGIN


def random_fn(rng) -> ThresholdFn:
    return ThresholdFn("sigmoid", 1.0) if rng.random() < 0.5 else ThresholdFn("exponential", 1.0)


def random_linear(rng):
    while True:
        a, b = rng.integers(2, 6, size=2)
        W = rng.normal(size=(b, a))
        gran = rng.choice(K.GRANULARITIES)
        p = random_threshold(rng, gran, W.shape, random_fn(rng))
        if margin_ok(W, p):
            return StrLinear(a, b, p, weight=W, name="lin"), rng.normal(size=(3, a))


def random_conv(rng, depthwise=False):
    while True:
        c = int(rng.integers(1, 4)) if not depthwise else int(rng.integers(2, 4))
        cout = c if depthwise else int(rng.integers(1, 4))
        k = int(rng.choice([1, 2, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        groups = c if depthwise else 1
        W = rng.normal(size=(cout, c // groups, k, k))
        gran = rng.choice(K.GRANULARITIES)
        p = random_threshold(rng, gran, W.shape, random_fn(rng))
        if margin_ok(W, p):
            layer = StrConv(c, cout, k, stride, pad, groups, p, weight=W, name="conv")
            return layer, rng.normal(size=(2, c, 5, 5))


def random_channel_prune(rng):
    while True:
        inner, x = random_conv(rng) if rng.random() < 0.5 else random_linear(rng)
        n = inner.weight.value.shape[0]
        m = rng.normal(size=n)
        mp = random_threshold(rng, "per-weight", (n,), ThresholdFn("exponential", 1.0))
        if margin_ok(m, mp):
            return ChannelPrune(inner, m, mp), x


def layer_gradients(layer, x, rng):
    """Analytic and finite-difference gradients for ``L = sum(R * layer(x))``."""
    R = rng.normal(size=layer.forward(x).shape)

    def loss():
        return float(np.sum(R * layer.forward(x)))

    params = layer.parameters()
    for p in params:
        p.zero_grad()
    layer.forward(x)
    layer.backward(R)
    return [(p.name, p.grad.copy(), central_difference(loss, p.value)) for p in params]


def cell_gradients(cell, X, rng):
    R = rng.normal(size=cell.forward(X).shape)

    def loss():
        return float(np.sum(R * cell.forward(X)))

    cell.zero_grad()
    cell.forward(X)
    cell.backward(R)
    return [(p.name, p.grad.copy(), central_difference(loss, p.value)) for p in cell.parameters()]


# -- dense reference trainer -------------------------------------------------------------

def reference_cosine(step, total, warmup, base):
    if step < warmup:
        return base * (step + 1) / warmup
    t = (step - warmup) / (total - warmup)
    return 0.5 * base * (1.0 + math.cos(math.pi * t))


def reference_dense_training(weights, X, y, lam, lr, momentum, batch_size, epochs, warmup_epochs, seed, max_steps):
    """Plain bias-free ReLU MLP with softmax cross-entropy and momentum SGD."""
    Ws = [w.copy() for w in weights]
    vel = [np.zeros_like(w) for w in Ws]
    rng = np.random.default_rng(seed)
    n = len(X)
    steps_per_epoch = math.ceil(n / batch_size)
    total, warm = epochs * steps_per_epoch, warmup_epochs * steps_per_epoch
    step = 0
    snapshots = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            if step >= max_steps:
                return snapshots
            idx = order[b * batch_size:(b + 1) * batch_size]
            acts = [X[idx]]
            for i, W in enumerate(Ws):
                z = acts[-1] @ W.T
                acts.append(z * (z > 0) if i < len(Ws) - 1 else z)
            logits = acts[-1]
            m = len(idx)
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            p = e / e.sum(axis=1, keepdims=True)
            p[np.arange(m), y[idx]] -= 1.0
            g = p / m
            grads = [None] * len(Ws)
            for i in reversed(range(len(Ws))):
                grads[i] = g.T @ acts[i]
                g = g @ Ws[i]
                if i > 0:
                    g = g * (acts[i] > 0)
            lr_t = reference_cosine(step, total, warm, lr)
            for i in range(len(Ws)):
                vel[i] = momentum * vel[i] + (grads[i] + lam * Ws[i])
                Ws[i] = Ws[i] - lr_t * vel[i]
            snapshots.append([w.copy() for w in Ws])
            step += 1
    return snapshots


def random_cell(rng):
    from strsparse.fastgrnn import LowRankFastGRNN

    while True:
        D, H = int(rng.integers(2, 4)), int(rng.integers(2, 5))
        cell = LowRankFastGRNN(D, H, n_classes=2, seed=int(rng.integers(1_000_000)), init_std=0.5)
        cell.m_W.value[...] = rng.normal(size=D)
        cell.m_U.value[...] = rng.normal(size=H)
        for sp, m in ((cell.s_W, cell.m_W), (cell.s_U, cell.m_U)):
            sp.param.value[...] = np.log(rng.uniform(0.05, 0.8, size=m.value.shape))
        if margin_ok(cell.m_W.value, cell.s_W) and margin_ok(cell.m_U.value, cell.s_U):
            return cell, rng.normal(size=(2, 3, D))


# -- published layer tables ----------------------------------------------------------------

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


def published_table(arch: str):
    """Rows of the published per-layer table: {layer: {"params", "flops", "s": {column: pct}}}."""
    import csv

    with open(FIXTURES / f"{arch}_table.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        out = {}
        for row in reader:
            out[row["layer"]] = {
                "params": int(row["dense_params"]),
                "flops": int(row["dense_flops"]),
                "s": {k[2:]: float(v) for k, v in row.items() if k.startswith("s_")},
            }
    return out
