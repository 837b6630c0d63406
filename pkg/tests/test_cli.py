import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mlda.cli import ConfigError, ExperimentConfig, load_snapshot, main, parse_config, \
    save_snapshot
from mlda.data import Dataset, gen_blobs
from mlda.nn import Model, parse_layers

QUICK = """
[method]
name = {method}
[train]
epochs = 3
selection_window = 2
[data]
n = 90
[run]
runs = 2
out = {out}
"""


def quick_config(tmp_path, method="l-dann", name="cfg.ini", out="out", extra=""):
    path = tmp_path / name
    path.write_text(QUICK.format(method=method, out=tmp_path / out) + extra)
    return path


def test_defaults_without_any_keys():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    tc = cfg.train_config()
    assert (tc.method, tc.epochs, tc.lam, tc.beta, tc.reduction) == ("none", 100, 10.0, 1.0, 16)
    assert cfg.runs == 10 and cfg.classifier_specs()[0].width == 3


def test_invalid_value_names_key_and_line():
    with pytest.raises(ConfigError, match=r"line 3: epochs: must be >= 1"):
        parse_config("[train]\n# comment\nepochs = -1\n")


def test_lambda_key_sets_penalty():
    assert parse_config("[method]\nlambda = 5").train_config().lam == 5.0


@pytest.mark.parametrize("text,fragment", [
    ("[train]\nepoch = 3", "unknown key 'epoch'"),
    ("[trainer]\n", "unknown section"),
    ("epochs = 3", "outside any section"),
    ("[train]\nepochs 3", "expected 'key = value'"),
    ("[method]\nname = gan", "name"),
    ("[train]\nepochs = 10\nselection_window = 20", "line 3"),
])
def test_config_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_train_twice_is_bit_identical(tmp_path):
    for out in ("a", "b"):
        assert main(["train", "--config", str(quick_config(tmp_path, out=out))]) == 0
    for k in range(2):
        a = (tmp_path / "a" / f"run_{k:02d}" / "history.csv").read_bytes()
        assert a == (tmp_path / "b" / f"run_{k:02d}" / "history.csv").read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    accs = [r["target_accuracy"] for r in summary["per_run"]]
    assert summary["target_accuracy"]["n"] == 2
    assert summary["target_accuracy"]["mean"] == pytest.approx(np.mean(accs))
    assert summary["target_accuracy"]["std"] == pytest.approx(np.std(accs, ddof=1))


def test_divergent_config_reports_nc(tmp_path):
    cfg = quick_config(tmp_path, method="none", extra="[train]\nlr_main = 1000\n")
    assert main(["train", "--config", str(cfg)]) == 1
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["status"] == "N/C" and summary["target_accuracy"] == "N/C"
    assert summary["diverged_runs"] == 2
    assert all(r["status"] == "N/C" for r in summary["per_run"])


def test_artifact_schema(tmp_path):
    assert main(["train", "--config", str(quick_config(tmp_path, method="l-wass"))]) == 0
    run_dir = tmp_path / "out" / "run_00"
    assert sorted(p.name for p in run_dir.iterdir()) == \
        ["history.csv", "metrics.json", "model.json", "snapshot.ladt"]
    with open(run_dir / "history.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "train_loss", "val_acc", "target_acc", "domain_acc",
                       "w1_estimate_0", "w1_estimate_1"]
    assert len(rows) == 4 and all(r[4] == "" for r in rows[1:])
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert set(metrics) == {"schema_version", "run", "seed", "status", "selected_epoch",
                            "target_accuracy", "metrics"}
    assert set(metrics["metrics"]["target"]) == {"precision", "recall", "f1", "accuracy",
                                                 "confusion"}
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert set(summary) == {"schema_version", "method", "runs", "status", "diverged_runs",
                            "target_accuracy", "per_run", "config"}


def test_methods_share_summary_schema(tmp_path):
    keys = []
    for method in ("none", "l-dann"):
        cfg = quick_config(tmp_path, method=method, name=f"{method}.ini", out=method)
        assert main(["train", "--config", str(cfg), "--runs", "1"]) == 0
        summary = json.loads((tmp_path / method / "summary.json").read_text())
        keys.append((sorted(summary), sorted(summary["per_run"][0]), sorted(summary["config"])))
    assert keys[0] == keys[1]


def test_cli_overrides(tmp_path):
    cfg = quick_config(tmp_path, method="none")
    assert main(["train", "--config", str(cfg), "--runs", "1", "--seed", "7",
                 "--method", "dann", "--out", str(tmp_path / "o")]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["method"] == "dann" and summary["per_run"][0]["seed"] == 7


def test_gen_data_is_deterministic(tmp_path):
    for out in ("x", "y"):
        assert main(["gen-data", "--seed", "1", "--out", str(tmp_path / out)]) == 0
    for name in ("source.ladt", "target.ladt"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()
    assert Dataset.load(tmp_path / "x" / "target.ladt").domain == 1


def test_train_from_generated_files(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d")]) == 0
    cfg = quick_config(tmp_path, method="none", extra=(
        f"[data]\nsource = {tmp_path / 'd' / 'source.ladt'}\n"
        f"target = {tmp_path / 'd' / 'target.ladt'}\n"))
    assert main(["train", "--config", str(cfg), "--runs", "1"]) == 0


def test_eval_perfect_fixture(tmp_path, capsys):
    # hand-set weights: logit k is relu(+-x0), separating the blobs at x0 = +-4
    model = Model((2,), parse_layers("dense:2, relu"), parse_layers("dense:2"), seed=0)
    w1, b1, w2, b2 = model.parameters()
    w1.value[...] = [[1.0, -1.0], [0.0, 0.0]]
    b1.value[...] = 0
    w2.value[...] = np.eye(2)
    b2.value[...] = 0
    run_dir = tmp_path / "snap"
    run_dir.mkdir()
    save_snapshot(run_dir, model)
    data = gen_blobs(40, 2, 2, seed=0)  # class 0 at x=+4, class 1 at x=-4
    data = Dataset(data.samples, data.labels)
    data.save(tmp_path / "eval.ladt")
    assert main(["eval", "--snapshot", str(run_dir / "snapshot.ladt"),
                 "--data", str(tmp_path / "eval.ladt")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["accuracy"] == out["precision"] == out["recall"] == out["f1"] == 100.0
    assert load_snapshot(run_dir / "snapshot.ladt").param_count() == model.param_count()


def test_check_grad_passes(capsys):
    assert main(["check-grad", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert "gradient-penalty C'=256" in out and "conv3x3-valid" in out


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["eval"])
    assert info.value.code == 2
    assert main(["train", "--config", str(tmp_path / "missing.ini")]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nepochs = -1\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "epochs" in capsys.readouterr().err
    (tmp_path / "junk.ladt").write_bytes(b"JUNK")
    assert main(["eval", "--snapshot", str(tmp_path / "junk.ladt"), "--data",
                 str(tmp_path / "junk.ladt"), "--model", str(tmp_path / "none.json")]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mlda"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr
