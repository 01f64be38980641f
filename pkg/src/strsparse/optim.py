"""SGD with momentum and L2 weight decay, cosine schedule, and the training loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .kernel import threshold_summary
from .layers import mse_loss, softmax_cross_entropy
from .params import unique_parameters
from .tensor import DimensionError


@dataclass
class TrainConfig:
    lam: float = 5e-4          # weight decay on weights and thresholds
    s_init: float = -5.0
    base_lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 20
    warmup_epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs must be in [0, epochs), got {self.warmup_epochs} (epochs={self.epochs})")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


class TrainingDiverged(RuntimeError):
    pass


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, lam: float, momentum: float):
    """One momentum-SGD step with the L2 term folded into the gradient.

    With ``momentum == 0`` and ``grad == 0`` this is ``param * (1 - lr * lam)``.
    Returns the new ``(param, velocity)``; inputs are not modified.
    """
    if not param.shape == grad.shape == velocity.shape:
        raise DimensionError(f"sgd_step: shapes {param.shape}, {grad.shape}, {velocity.shape} differ")
    d = grad + lam * param if lam else grad
    velocity = momentum * velocity + d
    return param - lr * velocity, velocity


def s_update(s, grad_s_value, lr, lam, momentum=0.0, velocity=None):
    """Threshold update through the same machinery as the weights.

    ``grad_s_value`` is ``dL/ds = -g'(s) * P``.  With zero momentum this is
    ``s + lr * g'(s) * P - lr * lam * s``.
    """
    s = np.asarray(s, dtype=np.float64)
    velocity = np.zeros_like(s) if velocity is None else velocity
    grad = np.broadcast_to(np.asarray(grad_s_value, dtype=np.float64), s.shape)
    return sgd_step(s, grad, velocity, lr, lam, momentum)


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warm-up to ``base_lr`` followed by half-cosine decay to zero."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if not 0 <= warmup_steps < total_steps:
        raise ValueError(f"warmup_steps {warmup_steps} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t))


class SGD:
    """Momentum SGD over a fixed parameter list (shared objects updated once)."""

    def __init__(self, params, lam: float, momentum: float):
        self.params = [p for p in unique_parameters(params) if p.trainable]
        self.lam = lam
        self.momentum = momentum
        self.velocity = {id(p): np.zeros_like(p.value) for p in self.params}

    def step(self, lr: float) -> None:
        for p in self.params:
            lam = self.lam if p.decay else 0.0
            new, v = sgd_step(p.value, p.grad, self.velocity[id(p)], lr, lam, self.momentum)
            p.value[...] = new
            self.velocity[id(p)] = v


@dataclass
class TrainReport:
    layer_names: list
    rows: list = field(default_factory=list)  # (epoch, loss, acc, sparsity, [alpha...])
    final_accuracy: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def header(self):
        return ["epoch", "loss", "acc", "sparsity"] + [f"alpha_{n}" for n in self.layer_names]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for epoch, loss, acc, sp, alphas in self.rows:
            w.writerow([epoch, repr(loss), repr(acc), repr(sp)] + [repr(a) for a in alphas])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def column(self, name: str):
        idx = self.header.index(name)
        return [([r[0], r[1], r[2], r[3]] + list(r[4]))[idx] for r in self.rows]

    @property
    def final_sparsity(self) -> float:
        return self.rows[-1][3]

    @property
    def final_alphas(self) -> list:
        return list(self.rows[-1][4])


def accuracy(model, X, y, batch_size: int = 512) -> float:
    correct = 0
    for i in range(0, len(X), batch_size):
        out = model.forward(X[i:i + batch_size])
        correct += int(np.sum(np.argmax(out, axis=1) == y[i:i + batch_size]))
    return correct / len(X)


def _first_nonfinite_layer(model, X):
    h = X
    with np.errstate(all="ignore"):
        for i, layer in enumerate(getattr(model, "layers", [])):
            h = layer.forward(h)
            if not np.all(np.isfinite(h)):
                return getattr(layer, "name", f"layer {i}")
    return None


def _check_finite(model, loss, X=None):
    if np.isfinite(loss):
        return
    for p in model.parameters():
        if not np.all(np.isfinite(p.value)) or not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite loss; first offending parameter: {p.name}")
    where = _first_nonfinite_layer(model, X) if X is not None else None
    if where is not None:
        raise TrainingDiverged(f"non-finite loss; first layer with non-finite output: {where}")
    raise TrainingDiverged("non-finite loss (all parameters finite; check inputs/learning rate)")


def train(model, X, y, cfg: TrainConfig, loss: str = "xent", eval_data=None, after_step=None,
          full_batch: bool = False, on_epoch_end=None) -> TrainReport:
    """Mini-batch training with per-epoch loss, accuracy, sparsity and threshold logging.

    ``after_step(model)`` runs after each optimizer step and
    ``on_epoch_end(model, report)`` after each logged epoch.  ``loss`` is
    ``"xent"`` (integer labels) or ``"mse"``.
    """
    if len(X) == 0:
        raise ValueError("empty dataset")
    if len(X) != len(y):
        raise DimensionError(f"{len(X)} inputs but {len(y)} targets")
    loss_fn = softmax_cross_entropy if loss == "xent" else mse_loss
    rng = np.random.default_rng(cfg.seed)
    n = len(X)
    bs = n if full_batch else min(cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    opt = SGD(model.parameters(), cfg.lam, cfg.momentum)
    names = [name for name, _ in model.str_params()]
    report = TrainReport(layer_names=names)
    step = 0
    for epoch in range(cfg.epochs):
        order = np.arange(n) if full_batch else rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            model.zero_grad()
            with np.errstate(over="ignore", invalid="ignore"):
                out = model.forward(X[idx])
                value, grad = loss_fn(out, y[idx])
            _check_finite(model, value, X[idx])
            model.backward(grad)
            opt.step(cosine_lr(step, total, warmup, cfg.base_lr))
            if after_step is not None:
                after_step(model)
            losses.append(value)
            step += 1
        _check_finite(model, float(np.mean(losses)))
        if loss == "xent":
            ex, ey = eval_data if eval_data is not None else (X, y)
            acc = accuracy(model, ex, ey)
        else:
            acc = float("nan")
        alphas = [threshold_summary(p) for _, p in model.str_params()]
        report.rows.append((epoch + 1, float(np.mean(losses)), acc, model.overall_sparsity(), alphas))
        if on_epoch_end is not None:
            on_epoch_end(model, report)
    report.final_accuracy = report.rows[-1][2]
    return report
