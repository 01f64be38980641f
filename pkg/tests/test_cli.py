import json
import subprocess
import sys

import pytest

from strsparse import budget as B
from strsparse.cli import OUTPUT_ENV, build_parser, main

FAST = ["--set", "epochs=3", "--set", "warmup_epochs=1"]


@pytest.fixture(autouse=True)
def out_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv(OUTPUT_ENV, str(root))
    return root


def run_dirs(root):
    return sorted(p for p in root.iterdir()) if root.exists() else []


def test_budget_resnet50(capsys):
    assert main(["budget", "resnet50"]) == 0
    overall = capsys.readouterr().out.splitlines()[1].split()
    assert overall[0] == "Overall" and overall[1] == "25502912" and overall[-2] == "4089284608"


def test_budget_mobilenetv1(capsys):
    assert main(["budget", "mobilenetv1"]) == 0
    overall = capsys.readouterr().out.splitlines()[1].split()
    assert overall[1] == "4209088" and overall[-2] == "568740352"


def test_budget_with_sparsity_csv(capsys, tmp_path):
    path = B.builtin_budget_path("resnet50_str_90.23")
    out_csv = tmp_path / "out.csv"
    assert main(["budget", "resnet50", "--sparsity-csv", str(path), "--csv", str(out_csv)]) == 0
    overall = capsys.readouterr().out.splitlines()[1].split()
    assert abs(float(overall[-1]) - 343e6) / 343e6 < 0.02
    assert out_csv.read_text().startswith(",".join(B.BUDGET_HEADER))


def test_bad_budget_csv_is_line_numbered(capsys, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("layer,sparsity_pct\nconv1,10\nfc,oops\n")
    assert main(["budget", "resnet50", "--sparsity-csv", str(bad)]) == 2
    assert "bad.csv:3:" in capsys.readouterr().err
    assert main(["import-budget", str(bad)]) == 2


def test_export_and_import_budget(capsys, tmp_path):
    out = tmp_path / "m.csv"
    sp = B.builtin_budget_path("mobilenetv1_str_89.01")
    assert main(["export-budget", "mobilenetv1", "--sparsity-csv", str(sp), "-o", str(out)]) == 0
    assert B.import_budget(out) == B.import_budget(sp) | {"avgpool": 0.0}
    assert main(["import-budget", str(out), "--arch", "mobilenetv1"]) == 0
    assert "Overall" in capsys.readouterr().out
    assert main(["export-budget", "mobilenetv1"]) == 0
    assert capsys.readouterr().out.startswith("layer,")


def test_train_writes_run_dir(capsys, out_root):
    assert main(["train", "--set", "lambda=3e-5", *FAST]) == 0
    (run,) = run_dirs(out_root)
    assert {p.name for p in run.iterdir()} == {"config.json", "summary.json", "trajectory.csv", "budget.csv",
                                               "checkpoint.json"}
    assert json.loads((run / "config.json").read_text())["resolved"]["lam"] == 3e-5
    assert "accuracy=" in capsys.readouterr().out


def test_train_is_deterministic(out_root):
    for _ in range(2):
        assert main(["train", "--set", "model=cnn", *FAST]) == 0
    a, b = run_dirs(out_root)
    assert a != b
    for name in ("summary.json", "budget.csv", "trajectory.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_config_file_and_overrides(tmp_path, out_root):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": "mlp", "lam": 0.5, "epochs": 3, "warmup_epochs": 1, "seed": 7}))
    assert main(["train", "--config", str(cfg), "--set", "lam=1e-4"]) == 0
    (run,) = run_dirs(out_root)
    resolved = json.loads((run / "config.json").read_text())["resolved"]
    assert resolved["lam"] == 1e-4 and resolved["seed"] == 7


@pytest.mark.parametrize("args,msg", [(["--set", "lamda=1"], "unknown config key 'lamda'"),
                                      (["--set", "epochs=two"], "epochs: expected int"),
                                      (["--set", "model=resnet"], "model"),
                                      (["--set", "noequals"], "key=value"),
                                      (["--set", "warmup_epochs=9", "--set", "epochs=3"], "warmup_epochs")])
def test_config_errors_exit_2(capsys, args, msg):
    assert main(["train", *args]) == 2
    assert msg in capsys.readouterr().err


def test_config_file_errors(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"model": "mlp",\n "oops": 1}')
    assert main(["train", "--config", str(bad)]) == 2
    assert "oops" in capsys.readouterr().err
    bad.write_text('{"model": \n')
    assert main(["train", "--config", str(bad)]) == 2
    assert "bad.json:" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2


def test_missing_dataset_exit_2(capsys, tmp_path):
    args = ["train", "--set", "task=idx-images", "--set", "synthetic_fallback=false",
            "--set", f"idx_images={tmp_path / 'train-images.idx'}", "--set", f"idx_labels={tmp_path / 'lab.idx'}"]
    assert main(args) == 2
    assert "train-images.idx" in capsys.readouterr().err


def test_divergence_exit_1(capsys):
    assert main(["train", "--set", "base_lr=1e6", "--set", "epochs=4", "--set", "warmup_epochs=0"]) == 1
    assert "diverged" in capsys.readouterr().err


def test_inspect_checkpoint(capsys, out_root):
    assert main(["train", "--set", "model=cnn", "--set", "granularity=per-channel", *FAST]) == 0
    (run,) = run_dirs(out_root)
    capsys.readouterr()
    assert main(["inspect-checkpoint", str(run / "checkpoint.json")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [l.split()[0] for l in lines[1:]] == ["conv1", "conv2", "fc", "overall"]
    assert "per-channel" in lines[1]


def test_train_rnn(capsys, out_root):
    assert main(["train", "--set", "experiment=rnn", "--set", "epochs=2", "--set", "warmup_epochs=1"]) == 0
    (run,) = run_dirs(out_root)
    summary = json.loads((run / "summary.json").read_text())
    assert summary["str"]["r_W"] <= 8 and "baseline" in summary


def test_sparse_regression_r0(capsys):
    assert main(["sparse-regression", "-d", "40", "-n", "15", "-r", "0", "--seeds", "2", "--epochs", "200"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["mean_f1"] == 1.0 and summary["seeds"] == 2


def test_sparse_regression_auto_lambda(capsys):
    assert main(["sparse-regression", "-d", "40", "-n", "20", "-r", "2", "--seeds", "1", "--epochs", "300",
                 "--auto-lambda", "--target-f1", "0.9", "--max-trials", "4"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["lambda_search"] and summary["lam"] in [t["lam"] for t in summary["lambda_search"]]


def test_sparse_regression_bad_sizes(capsys):
    assert main(["sparse-regression", "-d", "10", "-n", "20", "-r", "2"]) == 2


def test_sweep_zero_and_impossible(capsys, tmp_path):
    assert main(["sweep", "--target", "0"]) == 0
    assert capsys.readouterr().out.startswith("lambda=0.0 ")
    out = tmp_path / "s.json"
    assert main(["sweep", "--target", "100", "--set", "epochs=2", "--set", "warmup_epochs=0",
                 "--output", str(out)]) == 0
    assert json.loads(out.read_text())["converged"] is False


def test_sweep_requires_mlp(capsys):
    assert main(["sweep", "--set", "model=cnn"]) == 2


def test_every_subcommand_help_lists_defaults():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    assert set(sub.choices) == {"train", "budget", "sparse-regression", "sweep", "export-budget", "import-budget",
                                "inspect-checkpoint"}
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            if action.dest == "help" or not action.option_strings:
                continue
            assert action.option_strings[-1] in text, (name, action.dest)
            assert f"(default: {action.default})" in " ".join(text.split()), (name, action.dest)
    assert "lam" in sub.choices["train"].format_help() and "default: 'per-layer'" in sub.choices["train"].format_help()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "strsparse.cli", "budget", "mobilenetv1"], capture_output=True,
                         text=True, check=True)
    assert "568740352" in out.stdout
