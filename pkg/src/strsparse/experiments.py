"""Desk-scale studies: sparse regression, classification, low-rank RNN, lambda sweep, budget transfer."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import budget as B
from . import kernel as K
from .data import DatasetError, gaussian_blobs, load_idx_dataset, pattern_images, sequence_task
from .fastgrnn import LowRankFastGRNN, effective_rank
from .kernel import StrParam, ThresholdFn
from .layers import Sequential, StrLinear, build_cnn, build_mlp
from .optim import TrainConfig, TrainReport, train
from .pruning import keep_count, magnitude_mask, magnitude_prune_to_budget  # noqa: F401  (re-export)

FNS = {"sigmoid": K.SIGMOID, "exponential": K.EXPONENTIAL}

# tuned per task; see the README for how they were picked
MLP_CONFIG = TrainConfig(lam=1e-2, s_init=-8.0, base_lr=0.1, momentum=0.9, batch_size=64, epochs=30,
                         warmup_epochs=3)
CNN_CONFIG = TrainConfig(lam=3e-2, s_init=-8.0, base_lr=0.05, momentum=0.9, batch_size=32, epochs=20,
                         warmup_epochs=2)
REGRESSION_CONFIG = TrainConfig(lam=0.1, s_init=-10.0, base_lr=0.2, momentum=0.9, batch_size=100,
                                epochs=2000, warmup_epochs=0)
RNN_CONFIG = TrainConfig(lam=0.016, s_init=-10.0, base_lr=0.05, momentum=0.9, batch_size=32, epochs=60,
                         warmup_epochs=2)
TRANSFER_LAM = 0.04


# -- sparse regression ---------------------------------------------------------------

@dataclass
class SparseRegressionProblem:
    X: np.ndarray
    w_star: np.ndarray
    y: np.ndarray
    support: np.ndarray
    seed: int

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def r(self) -> int:
        return len(self.support)


def make_problem(d: int, n: int, r: int, seed: int = 0, max_tries: int = 100) -> SparseRegressionProblem:
    """Noise-free ``y = X w*`` with ``r`` unit entries; redraws X (next seed) until it has full row rank."""
    if not 0 <= r <= d:
        raise ValueError(f"need 0 <= r <= d, got r={r}, d={d}")
    for attempt in range(max_tries):
        rng = np.random.default_rng(seed + attempt)
        X = rng.normal(size=(n, d))
        if np.linalg.matrix_rank(X) == min(n, d):
            break
    else:
        raise RuntimeError(f"no full-rank design after {max_tries} draws")
    support = np.sort(rng.choice(d, size=r, replace=False))
    w_star = np.zeros(d)
    w_star[support] = 1.0
    return SparseRegressionProblem(X, w_star, X @ w_star, support, seed + attempt)


def identifiable(problem: SparseRegressionProblem, tol: float = 1e-8) -> bool:
    """Least squares restricted to the true support reproduces ``y``."""
    if problem.r == 0:
        return bool(np.max(np.abs(problem.y), initial=0.0) <= tol)
    Xs = problem.X[:, problem.support]
    coef, *_ = np.linalg.lstsq(Xs, problem.y, rcond=None)
    return bool(np.max(np.abs(Xs @ coef - problem.y)) <= tol)


def support_metrics(found, truth) -> dict:
    """Precision, recall and F1 of a recovered index set; empty vs empty scores 1."""
    found, truth = set(int(i) for i in found), set(int(i) for i in truth)
    tp = len(found & truth)
    if not found and not truth:
        return {"precision": 1.0, "recall": 1.0, "f1": 1.0}
    precision = tp / len(found) if found else 0.0
    recall = tp / len(truth) if truth else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def sparse_regression_run(d: int = 300, n: int = 100, r: int = 5, cfg: TrainConfig = REGRESSION_CONFIG,
                          fn: ThresholdFn = K.SIGMOID, init_std: float = 0.01, freeze_threshold: bool = False,
                          problem: SparseRegressionProblem | None = None) -> dict:
    """Fit one STR weight vector to ``y = X w*`` with squared loss, full batch."""
    if problem is None:
        problem = make_problem(d, n, r, seed=cfg.seed)
    d, n = problem.d, problem.n
    rng = np.random.default_rng(cfg.seed)
    p = StrParam.init("per-layer", (1, d), cfg.s_init, fn, name="w.s", trainable=not freeze_threshold)
    layer = StrLinear(d, 1, p, weight=rng.normal(0.0, init_std, (1, d)), name="w")
    model = Sequential([layer], input_shape=(d,))
    rep = train(model, problem.X, problem.y[:, None], cfg, loss="mse", full_batch=True)
    w = layer.effective_weight()[0]
    found = np.flatnonzero(w)
    out = {"seed": cfg.seed, "problem_seed": problem.seed, "identifiable": identifiable(problem),
           "support": [int(i) for i in found], "nnz": int(len(found)), "final_loss": rep.rows[-1][1],
           "alpha": K.threshold_summary(p), "w": w}
    out.update(support_metrics(found, problem.support))
    return out


# -- classification -----------------------------------------------------------------

TASKS = ("synthetic", "synthetic-blobs", "synthetic-images", "idx-images")


@dataclass
class RunResult:
    report: TrainReport
    budget: B.BudgetReport
    model: object
    summary: dict = field(default_factory=dict)


def load_task(task: str, model: str, seed: int, idx_images=None, idx_labels=None, synthetic_fallback: bool = True,
              idx_limit: int | None = None):
    if task == "idx-images":
        try:
            if idx_images is None or idx_labels is None:
                raise DatasetError("idx-images task needs both an images path and a labels path")
            return load_idx_dataset(idx_images, idx_labels, seed=seed, limit=idx_limit)
        except DatasetError:
            if not synthetic_fallback:
                raise
            task = "synthetic"
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if task == "synthetic-blobs" or (task == "synthetic" and model == "mlp"):
        return gaussian_blobs(seed=seed)
    return pattern_images(seed=seed)


def build_model(model: str, input_shape, n_classes: int, granularity: str, cfg: TrainConfig, fn: ThresholdFn,
                hidden=(64, 64), channels=(8, 16)):
    if model == "mlp":
        dim = int(np.prod(input_shape))
        return build_mlp([dim, *hidden, n_classes], granularity, cfg.s_init, fn, seed=cfg.seed)
    if model == "cnn":
        c, h, w = input_shape
        if h != w:
            raise ValueError(f"cnn expects square images, got {h}x{w}")
        return build_cnn(c, h, channels, n_classes, granularity, cfg.s_init, fn, seed=cfg.seed)
    raise ValueError(f"unknown model {model!r}; expected 'mlp' or 'cnn'")


def classification_run(task: str = "synthetic", model: str = "mlp", granularity: str = "per-layer",
                       cfg: TrainConfig | None = None, fn: ThresholdFn = K.SIGMOID, idx_images=None,
                       idx_labels=None, synthetic_fallback: bool = True, hidden=(64, 64), channels=(8, 16),
                       idx_limit: int | None = None) -> RunResult:
    cfg = cfg or (CNN_CONFIG if model == "cnn" else MLP_CONFIG)
    (Xtr, ytr), (Xte, yte) = load_task(task, model, cfg.seed, idx_images, idx_labels, synthetic_fallback,
                                       idx_limit)
    if model == "mlp":
        Xtr, Xte = Xtr.reshape(len(Xtr), -1), Xte.reshape(len(Xte), -1)
    n_classes = int(max(ytr.max(), yte.max())) + 1
    net = build_model(model, Xtr.shape[1:], n_classes, granularity, cfg, fn, hidden, channels)
    rep = train(net, Xtr, ytr, cfg, eval_data=(Xte, yte))
    bud = B.report_from_model(net)
    summary = {"final_accuracy": rep.final_accuracy, "final_sparsity": rep.final_sparsity,
               "layer_sparsity": net.layer_sparsities(), "alphas": dict(zip(rep.layer_names, rep.final_alphas)),
               "nonzeros": bud.overall.nonzeros, "sparse_flops": bud.overall.sparse_flops}
    return RunResult(rep, bud, net, summary)


# -- low-rank RNN ------------------------------------------------------------------------

def lowrank_rnn_run(cfg: TrainConfig = RNN_CONFIG, input_dim: int = 8, hidden_dim: int = 16, T: int = 12,
                    n: int = 1000, baseline: bool = True) -> dict:
    """STR on the FastGRNN rank masks against a full-rank run on the same data and init."""
    (Xtr, ytr), (Xte, yte) = sequence_task(n=n, T=T, dim=input_dim, seed=cfg.seed)
    n_classes = int(ytr.max()) + 1
    out = {"seed": cfg.seed, "D": input_dim, "H": hidden_dim}
    runs = [("str", True)] + ([("baseline", False)] if baseline else [])
    for tag, use in runs:
        cell = LowRankFastGRNN(input_dim, hidden_dim, n_classes, s_init=cfg.s_init, seed=cfg.seed, use_str=use)
        ranks = []
        run_cfg = cfg if use else cfg.replace(lam=0.0)
        rep = train(cell, Xtr, ytr, run_cfg, eval_data=(Xte, yte),
                    on_epoch_end=lambda m, _r: ranks.append(effective_rank(m)))
        out[tag] = {"accuracy": rep.final_accuracy, "r_W": ranks[-1][0], "r_U": ranks[-1][1],
                    "trajectory": [list(r) for r in ranks], "report": rep}
    return out


def nonincreasing_after_first(trajectory) -> bool:
    t = [tuple(r) for r in trajectory[1:]]
    return all(b[0] <= a[0] and b[1] <= a[1] for a, b in zip(t, t[1:]))


# -- budget transfer -------------------------------------------------------------------

def uniform_budget(sizes: dict, overall_pct: float) -> dict:
    return {name: float(overall_pct) for name in sizes}


def budget_overall(sizes: dict, budget: dict) -> float:
    """Overall sparsity (percent) of a per-layer budget after integer rounding of keep counts."""
    total = sum(sizes.values())
    kept = sum(keep_count(sizes[n], budget[n]) for n in sizes)
    return 100.0 * (1.0 - kept / total)


def apply_budget(model, budget: dict) -> None:
    layers = model.weighted_layers()
    names = [l.name for l in layers]
    missing = [n for n in names if n not in budget]
    extra = [n for n in budget if n not in names and n != "avgpool"]
    if missing or extra:
        raise B.BudgetError(f"budget/model layer mismatch: missing {missing}, unknown {extra}")
    for layer in layers:
        layer.budget_pct = float(budget[layer.name])


def budget_transfer_run(budget, model: str = "cnn", cfg: TrainConfig | None = None, lam: float = 5e-4,
                        data=None) -> TrainReport:
    """Train a dense-initialised model under fixed per-layer magnitude budgets.

    ``budget`` is a ``{layer: sparsity_pct}`` mapping or a path to a budget CSV.
    Masks are recomputed from ``|W|`` on every forward; pruned weights get no gradient.
    """
    cfg = (cfg or (CNN_CONFIG if model == "cnn" else MLP_CONFIG)).replace(lam=lam)
    if not isinstance(budget, dict):
        budget = B.import_budget(budget)
    if data is None:
        data = load_task("synthetic", model, cfg.seed)
    (Xtr, ytr), (Xte, yte) = data
    if model == "mlp":
        Xtr, Xte = Xtr.reshape(len(Xtr), -1), Xte.reshape(len(Xte), -1)
    n_classes = int(max(ytr.max(), yte.max())) + 1
    net = build_model(model, Xtr.shape[1:], n_classes, "dense", cfg, K.SIGMOID)
    apply_budget(net, budget)
    rep = train(net, Xtr, ytr, cfg, eval_data=(Xte, yte))
    rep.extra["budget"] = dict(budget)
    rep.extra["model"] = net
    return rep


def transfer_comparison(seed: int, cfg: TrainConfig = CNN_CONFIG, lam: float = TRANSFER_LAM) -> dict:
    """STR run to learn a budget, then learnt vs uniform magnitude budgets at equal overall sparsity."""
    cfg = cfg.replace(seed=seed, lam=lam)
    data = pattern_images(seed=seed)
    (Xtr, ytr), (Xte, yte) = data
    net = build_cnn(s_init=cfg.s_init, seed=seed)
    rep = train(net, Xtr, ytr, cfg, eval_data=(Xte, yte))
    learnt = {name: 100.0 * v for name, v in net.layer_sparsities().items()}
    sizes = {l.name: l.weight.value.size for l in net.weighted_layers()}
    overall = budget_overall(sizes, learnt)
    uniform = uniform_budget(sizes, overall)
    acc = {}
    for tag, bud in (("learnt", learnt), ("uniform", uniform)):
        acc[tag] = budget_transfer_run(bud, "cnn", cfg, data=data).final_accuracy
    return {"seed": seed, "str_accuracy": rep.final_accuracy, "learnt_budget": learnt, "overall_pct": overall,
            "learnt_accuracy": acc["learnt"], "uniform_accuracy": acc["uniform"]}


# -- lambda sweep -------------------------------------------------------------------------

@dataclass
class SweepResult:
    lam: float
    sparsity_pct: float
    converged: bool
    trials: list = field(default_factory=list)  # (lam, sparsity_pct) in evaluation order
    s_init: float | None = None
    note: str = ""


def mlp_proxy(cfg: TrainConfig = MLP_CONFIG, sizes=(16, 64, 64, 4)):
    """Sparsity (percent) of a short MLP run on the blob task as a function of lambda."""
    data = gaussian_blobs(seed=cfg.seed)

    def run(lam: float, s_init: float | None = None) -> float:
        c = cfg.replace(lam=lam, s_init=cfg.s_init if s_init is None else s_init)
        net = build_mlp(list(sizes), "per-layer", c.s_init, K.SIGMOID, seed=c.seed)
        (X, y), (Xt, yt) = data
        return 100.0 * train(net, X, y, c, eval_data=(Xt, yt)).final_sparsity

    return run


def lambda_sweep(target_sparsity_pct: float, tolerance_pct: float = 1.5, cfg_template: TrainConfig = MLP_CONFIG,
                 max_trials: int = 8, runner=None, bracket=(1e-4, 1e-1), refine_s_init: bool = False) -> SweepResult:
    """Search log(lambda) for a run whose final sparsity lands within tolerance of the target.

    Regula falsi (Illinois variant) on log(lambda) inside a bracket; a bracket
    that does not contain the target or is not monotone is widened 100x once.
    """
    if max_trials < 3:
        raise ValueError("max_trials must be >= 3")
    if target_sparsity_pct <= 0:
        return SweepResult(0.0, 0.0, True, [], note="target 0: no decay needed")
    runner = runner or mlp_proxy(cfg_template)
    trials = []

    def ev(lam):
        sp = float(runner(lam))
        trials.append((lam, sp))
        return sp

    def best(note, converged=False):
        lam, sp = min(trials, key=lambda t: (abs(t[1] - target_sparsity_pct), t[0]))
        return SweepResult(lam, sp, converged, trials, note=note)

    if target_sparsity_pct >= 100:
        ev(bracket[1])
        return best("target >= 100% leaves no weights; not attainable")

    def close():
        return any(abs(sp - target_sparsity_pct) <= tolerance_pct for _, sp in trials)

    def monotone():
        sps = [sp for _, sp in sorted(trials)]
        return all(x <= y for x, y in zip(sps, sps[1:]))

    lo, hi = bracket
    ev(lo)
    ev(hi)
    for widen in (False, True):
        if close():
            return best("converged at bracket end", True)
        below = [t for t in trials if t[1] < target_sparsity_pct]
        above = [t for t in trials if t[1] > target_sparsity_pct]
        if monotone() and below and above:
            break
        if widen or len(trials) + 2 > max_trials:
            return best("non-monotone or unbracketed after widening" if widen else "target not bracketed")
        ev(lo / 100.0)
        ev(hi * 100.0)
    # tightest bracket around the target
    lo, sp_lo = max(below)
    hi, sp_hi = min(above)
    f_lo, f_hi = sp_lo - target_sparsity_pct, sp_hi - target_sparsity_pct
    a, b = math.log(lo), math.log(hi)
    side = 0
    while len(trials) < max_trials:
        x = (a * f_hi - b * f_lo) / (f_hi - f_lo)
        # keep the interpolant off the ends
        x = min(max(x, a + 0.02 * (b - a)), b - 0.02 * (b - a))
        f = ev(math.exp(x)) - target_sparsity_pct
        if abs(f) <= tolerance_pct:
            return best("converged", True)
        if f < 0:
            a, f_lo = x, f
            if side == -1:
                f_hi /= 2.0
            side = -1
        else:
            b, f_hi = x, f
            if side == 1:
                f_lo /= 2.0
            side = 1
    res = best("max_trials reached")
    if refine_s_init:
        # nudge s_init at the best lambda; more negative delays pruning
        for s0 in (cfg_template.s_init - 1.0, cfg_template.s_init + 1.0):
            sp = float(runner(res.lam, s0))
            trials.append((res.lam, sp))
            if abs(sp - target_sparsity_pct) <= tolerance_pct:
                return SweepResult(res.lam, sp, True, trials, s_init=s0, note="converged after s_init refinement")
    return res


# -- run artifacts -------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items() if not isinstance(v, TrainReport)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, TrainConfig):
        return asdict(obj)
    return obj


def dumps_summary(summary: dict) -> str:
    return json.dumps(_jsonable(summary), sort_keys=True, indent=2) + "\n"


def write_run(run_dir, config: dict, summary: dict, report: TrainReport | None = None,
              budget: B.BudgetReport | None = None) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=False)
    (run_dir / "config.json").write_text(json.dumps(_jsonable(config), sort_keys=True, indent=2) + "\n")
    if report is not None:
        report.to_csv(run_dir / "trajectory.csv")
    if budget is not None:
        B.export_budget(budget, run_dir / "budget.csv")
    (run_dir / "summary.json").write_text(dumps_summary(summary))
    return run_dir
