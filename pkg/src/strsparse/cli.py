"""Command line entry point: ``strsparse <command> ...``.

Exit codes: 0 success, 1 training diverged (non-finite loss), 2 I/O or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import budget as B
from . import experiments as E
from . import kernel as K
from .data import DatasetError
from .layers import load_checkpoint, save_checkpoint
from .optim import TrainConfig, TrainingDiverged
from .tensor import from_json_obj

OUTPUT_ENV = "STRSPARSE_OUTPUT"
EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


# -- run config -------------------------------------------------------------------------

@dataclass
class RunConfig:
    experiment: str = "classification"   # classification | rnn
    task: str = "synthetic"              # synthetic | synthetic-blobs | synthetic-images | idx-images
    model: str = "mlp"                   # mlp | cnn
    granularity: str = "per-layer"       # global | per-layer | per-channel | per-weight | dense
    threshold_fn: str = "sigmoid"        # sigmoid | exponential
    threshold_k: float = 1.0
    idx_images: str | None = None
    idx_labels: str | None = None
    idx_limit: int | None = None
    synthetic_fallback: bool = True
    output_dir: str | None = None
    # training; None means the tuned default for the chosen model
    lam: float | None = None
    s_init: float | None = None
    base_lr: float | None = None
    momentum: float | None = None
    batch_size: int | None = None
    epochs: int | None = None
    warmup_epochs: int | None = None
    seed: int = 0

    def train_config(self) -> TrainConfig:
        if self.experiment == "rnn":
            base = E.RNN_CONFIG
        else:
            base = E.CNN_CONFIG if self.model == "cnn" else E.MLP_CONFIG
        changes = {f: getattr(self, f) for f in TrainConfig.field_names() if getattr(self, f) is not None}
        return base.replace(**changes)

    def threshold(self) -> K.ThresholdFn:
        return K.ThresholdFn(self.threshold_fn, self.threshold_k)

    def validate(self) -> None:
        choices = {"experiment": ("classification", "rnn"), "task": E.TASKS, "model": ("mlp", "cnn"),
                   "granularity": K.GRANULARITIES + ("dense",), "threshold_fn": ("sigmoid", "exponential")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}: {getattr(self, name)!r} is not one of {', '.join(allowed)}")
        try:
            self.threshold()
            self.train_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None


ALIASES = {"lambda": "lam", "lr": "base_lr"}
_TYPES = {"float": float, "int": int, "bool": bool, "str": str}


def _field_type(name):
    t = {f.name: f.type for f in fields(RunConfig)}[name]
    for key in ("bool", "int", "float", "str"):
        if t.startswith(key):
            return _TYPES[key]
    return str


def _coerce(name, value):
    if value is None:
        return None
    typ = _field_type(name)
    if isinstance(value, str):
        v = value.strip()
        if v.lower() in ("none", "null"):
            return None
        if typ is bool:
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        value = v
    try:
        if typ is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        if typ is bool and not isinstance(value, bool):
            raise ValueError
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {typ.__name__}, got {value!r}") from None


def make_config(data: dict | None = None, overrides=()) -> RunConfig:
    """Build a RunConfig from a mapping plus ``key=value`` overrides (overrides win)."""
    known = {f.name for f in fields(RunConfig)}
    values = {}
    items = list((data or {}).items())
    for text in overrides:
        if "=" not in text:
            raise ConfigError(f"--set expects key=value, got {text!r}")
        k, v = text.split("=", 1)
        items.append((k.strip(), v))
    for key, value in items:
        name = ALIASES.get(key, key)
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(known))}")
        values[name] = _coerce(name, value)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def read_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _schema_text() -> str:
    lines = ["config keys (JSON object; --set key=value overrides):"]
    for f in fields(RunConfig):
        lines.append(f"  {f.name:<20} default: {f.default!r}")
    lines.append("  'lambda' and 'lr' are accepted aliases for 'lam' and 'base_lr'.")
    lines.append("  training keys left as None take the tuned per-model defaults:")
    for tag, c in (("mlp", E.MLP_CONFIG), ("cnn", E.CNN_CONFIG), ("rnn", E.RNN_CONFIG)):
        lines.append(f"    {tag}: " + ", ".join(f"{k}={v}" for k, v in asdict(c).items() if k != "seed"))
    return "\n".join(lines)


# -- run directories ------------------------------------------------------------------------

def output_root(explicit=None) -> Path:
    return Path(explicit or os.environ.get(OUTPUT_ENV) or "runs")


def new_run_dir(root, config: dict) -> Path:
    """``<root>/<UTC timestamp>-<config hash>``; never reuses an existing directory."""
    digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:10]
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    base = Path(root) / f"{stamp}-{digest}"
    path, i = base, 1
    while path.exists():
        path = Path(f"{base}-{i}")
        i += 1
    return path


# -- commands -----------------------------------------------------------------------------------

def cmd_train(args) -> int:
    data = read_config(args.config) if args.config else {}
    cfg = make_config(data, args.set or [])
    tc = cfg.train_config()
    snapshot = {**asdict(cfg), "resolved": asdict(tc)}
    run_dir = new_run_dir(output_root(args.out or cfg.output_dir), snapshot)
    if cfg.experiment == "rnn":
        res = E.lowrank_rnn_run(tc)
        summary = {"experiment": "rnn", "seed": tc.seed,
                   **{tag: {k: v for k, v in res[tag].items() if k != "report"} for tag in ("str", "baseline")}}
        E.write_run(run_dir, snapshot, summary, report=res["str"]["report"])
        s = res["str"]
        print(f"accuracy={s['accuracy']:.4f} baseline={res['baseline']['accuracy']:.4f} "
              f"r_W={s['r_W']} r_U={s['r_U']} run_dir={run_dir}")
        return EXIT_OK
    res = E.classification_run(cfg.task, cfg.model, cfg.granularity, tc, cfg.threshold(), cfg.idx_images,
                               cfg.idx_labels, cfg.synthetic_fallback, idx_limit=cfg.idx_limit)
    summary = {"experiment": "classification", "model": cfg.model, "granularity": cfg.granularity,
               "seed": tc.seed, **res.summary}
    E.write_run(run_dir, snapshot, summary, report=res.report, budget=res.budget)
    save_checkpoint(res.model, run_dir / "checkpoint.json")
    print(f"accuracy={res.report.final_accuracy:.4f} sparsity={100 * res.report.final_sparsity:.2f}% "
          f"run_dir={run_dir}")
    return EXIT_OK


def cmd_budget(args) -> int:
    arch = B.load_arch(args.arch)
    if args.sparsity_csv:
        rep = B.report(arch, B.import_budget(args.sparsity_csv, arch.layer_names()))
    else:
        rep = B.report(arch)
    print(rep.format_table())
    if args.csv:
        B.export_budget(rep, args.csv)
    return EXIT_OK


def cmd_export_budget(args) -> int:
    arch = B.load_arch(args.arch)
    sp = B.import_budget(args.sparsity_csv, arch.layer_names()) if args.sparsity_csv else None
    text = B.export_budget(B.report(arch, sp), args.output)
    if args.output is None:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_import_budget(args) -> int:
    if args.arch:
        arch = B.load_arch(args.arch)
        rep = B.report(arch, B.import_budget(args.path, arch.layer_names()))
        print(rep.format_table())
    else:
        for name, s in B.import_budget(args.path).items():
            print(f"{name:<28} {s:8.2f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    state = load_checkpoint(args.path)
    print(f"{'layer':<16} {'shape':<18} {'granularity':<12} {'alpha_mean':>12} {'nonzeros':>10} {'sparsity%':>10}")
    total = nnz = 0
    for name, entry in state.items():
        W = from_json_obj(entry["W"])
        if "s" in entry:
            p = K.StrParam(entry["granularity"], from_json_obj(entry["s"]),
                           K.ThresholdFn(entry["fn"]["kind"], entry["fn"]["k"]))
            Ws, alpha, gran = K.str_forward(W, p), K.threshold_summary(p), entry["granularity"]
        else:
            Ws, alpha, gran = W, 0.0, "dense"
        n = int(np.count_nonzero(Ws))
        total, nnz = total + W.size, nnz + n
        print(f"{name:<16} {str(list(W.shape)):<18} {gran:<12} {alpha:>12.6g} {n:>10d} "
              f"{100 * (1 - n / W.size):>10.2f}")
    if total:
        print(f"{'overall':<16} {'':<18} {'':<12} {'':>12} {nnz:>10d} {100 * (1 - nnz / total):>10.2f}")
    return EXIT_OK


def _regression_seeds(args, lam):
    cfg = E.REGRESSION_CONFIG.replace(lam=lam, epochs=args.epochs, base_lr=args.lr)
    out = []
    for seed in range(args.seed, args.seed + args.seeds):
        r = E.sparse_regression_run(args.d, args.n, args.r, cfg.replace(seed=seed))
        r.pop("w")
        out.append(r)
    return out


def cmd_sparse_regression(args) -> int:
    if not 0 <= args.r <= args.n < args.d:
        raise ConfigError(f"need r <= n < d, got d={args.d}, n={args.n}, r={args.r}")
    lam, search = args.lam, []
    if args.auto_lambda:
        # descend a log grid on the first seed until the target F1 is met
        probe = argparse.Namespace(**{**vars(args), "seeds": 1})
        for cand in np.geomspace(1.0, 1e-3, args.max_trials):
            f1 = _regression_seeds(probe, float(cand))[0]["f1"]
            search.append({"lam": float(cand), "f1": f1})
            if f1 >= args.target_f1:
                lam = float(cand)
                break
        else:
            lam = max(search, key=lambda t: (t["f1"], t["lam"]))["lam"]
    runs = sorted(_regression_seeds(args, lam), key=lambda r: r["seed"])
    counted = [r for r in runs if r["identifiable"]]
    f1s = [r["f1"] for r in counted]
    summary = {"d": args.d, "n": args.n, "r": args.r, "lam": lam, "seeds": len(runs),
               "identifiable_seeds": len(counted), "mean_f1": float(np.mean(f1s)) if f1s else None,
               "seeds_f1_ge_0.9": sum(f >= 0.9 for f in f1s), "runs": runs}
    if search:
        summary["lambda_search"] = search
    text = E.dumps_summary(summary)
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    data = read_config(args.config) if args.config else {}
    cfg = make_config(data, args.set or [])
    if cfg.experiment != "classification" or cfg.model != "mlp":
        raise ConfigError("sweep uses the MLP proxy; set experiment=classification and model=mlp")
    tc = cfg.train_config()
    res = E.lambda_sweep(args.target, args.tolerance, tc, args.max_trials, refine_s_init=args.refine_s_init)
    summary = {"target_pct": args.target, "tolerance_pct": args.tolerance, "lam": res.lam,
               "sparsity_pct": res.sparsity_pct, "converged": res.converged, "s_init": res.s_init,
               "note": res.note, "trials": [{"lam": l, "sparsity_pct": s} for l, s in res.trials]}
    text = E.dumps_summary(summary)
    if args.output:
        Path(args.output).write_text(text)
    print(f"lambda={res.lam!r} sparsity={res.sparsity_pct:.2f}% converged={str(res.converged).lower()}")
    sys.stdout.write(text)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="strsparse", description=__doc__.splitlines()[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    class SchemaFormatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
        pass

    p = sub.add_parser("train", help="run a classification or low-rank RNN experiment",
                       formatter_class=SchemaFormatter, epilog=_schema_text())
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=None, help="override a config key")
    p.add_argument("--out", default=None, help=f"output root (else config output_dir, ${OUTPUT_ENV}, ./runs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("budget", help="per-layer params/FLOPs table", formatter_class=fmt)
    p.add_argument("arch", help="resnet50 | mobilenetv1 | file:<spec path>")
    p.add_argument("--sparsity-csv", default=None, help="budget CSV with per-layer sparsity_pct")
    p.add_argument("--csv", default=None, help="also write the report as a budget CSV")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("sparse-regression", help="support recovery on y = Xw* with sparse w*", formatter_class=fmt)
    p.add_argument("-d", type=int, default=300, help="dimension")
    p.add_argument("-n", type=int, default=100, help="samples")
    p.add_argument("-r", type=int, default=5, help="support size")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--lam", type=float, default=E.REGRESSION_CONFIG.lam, help="weight decay")
    p.add_argument("--lr", type=float, default=E.REGRESSION_CONFIG.base_lr, help="base learning rate")
    p.add_argument("--epochs", type=int, default=E.REGRESSION_CONFIG.epochs, help="full-batch steps")
    p.add_argument("--auto-lambda", action="store_true", help="search lambda on the first seed")
    p.add_argument("--target-f1", type=float, default=0.9, help="F1 target for --auto-lambda")
    p.add_argument("--max-trials", type=int, default=8, help="lambda candidates for --auto-lambda")
    p.add_argument("--output", default=None, help="write the summary JSON here as well")
    p.set_defaults(func=cmd_sparse_regression)

    p = sub.add_parser("sweep", help="find lambda for a target overall sparsity (MLP proxy)",
                       formatter_class=SchemaFormatter, epilog=_schema_text())
    p.add_argument("--target", type=float, default=90.0, help="target overall sparsity, percent")
    p.add_argument("--tolerance", type=float, default=1.5, help="allowed deviation, percent")
    p.add_argument("--max-trials", type=int, default=8, help="proxy runs allowed")
    p.add_argument("--refine-s-init", action="store_true", help="try s_init +-1 if lambda alone misses")
    p.add_argument("--config", default=None, help="JSON run config for the proxy")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=None, help="override a config key")
    p.add_argument("--output", default=None, help="write the summary JSON here as well")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-budget", help="write a budget CSV for an architecture", formatter_class=fmt)
    p.add_argument("arch", help="resnet50 | mobilenetv1 | file:<spec path>")
    p.add_argument("--sparsity-csv", default=None, help="per-layer sparsities to apply")
    p.add_argument("-o", "--output", default=None, help="output path (stdout if omitted)")
    p.set_defaults(func=cmd_export_budget)

    p = sub.add_parser("import-budget", help="validate and show a budget CSV", formatter_class=fmt)
    p.add_argument("path", help="budget CSV")
    p.add_argument("--arch", default=None, help="check against this architecture and print totals")
    p.set_defaults(func=cmd_import_budget)

    p = sub.add_parser("inspect-checkpoint", help="per-layer thresholds and sparsity of a checkpoint",
                       formatter_class=fmt)
    p.add_argument("path", help="checkpoint.json from a train run")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DatasetError, B.BudgetError, OSError, KeyError, ValueError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
