import csv
import hashlib
import json

import numpy as np
import pytest

from apnea_screen.cli import (
    CONFIG_FILE, EXIT_ARTIFACT, EXIT_CONFIG, EXIT_DATA, apply_overrides, choose_report, default_config,
    main, read_config_file,
)
from apnea_screen.dsp import read_cache
from apnea_screen.model import load_weights

SMALL = ["--set", "model.stem_filters=4", "--set", "model.stage_filters=4,8",
         "--set", "model.stage_blocks=1,1", "--set", "model.head_units=8"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data_args = ["--records", "5", "--seed", "3", "--set", "synth.duration_s=180",
                 "--set", "synth.apnea_event_rate_per_min=1"]
    assert main(["synth", *data_args, "--out", str(root / "data")]) == 0
    assert main(["preprocess", "--data", str(root / "data"), "--out", str(root / "cache")]) == 0
    assert main(["train", "--cache", str(root / "cache"), "--epochs", "2", "--seed", "1", *SMALL,
                 "--out", str(root / "run")]) == 0
    return root


def test_synth_outputs_and_determinism(workspace, tmp_path):
    data = workspace / "data"
    assert sorted(p.name for p in data.glob("*.wav")) == [f"rec0{i}.wav" for i in range(1, 6)]
    assert (data / "annotations.csv").exists() and (data / "split.csv").exists()
    assert (data / CONFIG_FILE).exists()
    assert main(["synth", "--records", "5", "--seed", "3", "--set", "synth.duration_s=180",
                 "--set", "synth.apnea_event_rate_per_min=1", "--out", str(tmp_path / "again")]) == 0
    for p in data.iterdir():
        assert sha(p) == sha(tmp_path / "again" / p.name), p.name


def test_synth_18_records(tmp_path):
    assert main(["synth", "--records", "18", "--seed", "7", "--set", "synth.duration_s=30",
                 "--set", "synth.apnea_event_rate_per_min=0", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*.wav"))) == 18
    roles = [row["role"] for row in csv.DictReader(open(tmp_path / "split.csv"))]
    assert roles.count("train") == 14 and roles.count("test") == 4


def test_synth_rejects_one_record(tmp_path, capsys):
    assert main(["synth", "--records", "1", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "at least 2 records" in capsys.readouterr().err


def test_preprocess_cache(workspace, capsys):
    train = read_cache(workspace / "cache" / "train.apne")
    test = read_cache(workspace / "cache" / "test.apne")
    assert set(train.y.tolist()) == {0, 1}
    assert train.x.shape[1:] == (128, 128) and len(test) == 6
    counts = json.loads((workspace / "cache" / "counts.json").read_text())
    assert counts["train"]["apnea"] == int(train.y.sum())
    assert set(train.record_ids) == {"rec01", "rec02", "rec03", "rec04"}


def test_preprocess_empty_split(workspace, tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    for p in (workspace / "data").glob("*.wav"):
        (data / p.name).write_bytes(p.read_bytes())
    (data / "annotations.csv").write_text((workspace / "data" / "annotations.csv").read_text())
    (data / "split.csv").write_text("record_id,role\n")
    assert main(["preprocess", "--data", str(data), "--out", str(tmp_path / "c")]) == EXIT_DATA


def test_preprocess_missing_files(tmp_path):
    assert main(["preprocess", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == EXIT_DATA


# -- config ---------------------------------------------------------------------


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\ntrain.epochs = 5\nloss.gamma = 3.0\nseed = 4\n")
    out = tmp_path / "o"
    assert main(["synth", "--config", str(cfg), "--set", "train.epochs=6", "--set", "synth.duration_s=30",
                 "--records", "2", "--seed", "9", "--out", str(out)]) == 0
    eff = read_config_file(out / CONFIG_FILE)
    assert eff["train.epochs"] == "6" and eff["loss.gamma"] == "3.0" and eff["seed"] == "9"
    assert eff["synth.records"] == "2"
    again = apply_overrides(default_config(), eff, "file")
    assert again["train.epochs"] == 6 and again["model.stage_blocks"] == (2, 2, 3, 3)
    assert again["eval.threshold"] is None and again["train.oversample"] is True


def test_config_round_trip_is_identity(tmp_path):
    from apnea_screen.cli import write_config_file
    write_config_file(tmp_path / "c.txt", default_config())
    assert apply_overrides(default_config(), read_config_file(tmp_path / "c.txt"), "f") == default_config()


@pytest.mark.parametrize("bad", [["--set", "train.nonsense=1"], ["--set", "train.epochs=many"],
                                 ["--set", "synth.apnea_suppression=1.0"], ["--set", "noequals"]])
def test_config_errors(tmp_path, bad):
    code = main(["synth", "--records", "2", "--set", "synth.duration_s=30", *bad, "--out", str(tmp_path)])
    assert code == EXIT_CONFIG


# -- train / evaluate ------------------------------------------------------------------


def test_train_outputs(workspace):
    run = workspace / "run"
    history = [json.loads(line) for line in (run / "history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in history] == [1, 2]
    assert list(history[0]) == ["epoch", "train_loss", "val_pr_auc", "val_recall", "lr", "seconds"]
    summary = json.loads((run / "train_summary.json").read_text())
    assert summary["balanced_counts"]["apnea"] == summary["balanced_counts"]["non_apnea"]
    assert read_config_file(run / CONFIG_FILE)["loss.kind"] == "bce"


def test_train_is_reproducible(workspace, tmp_path):
    assert main(["train", "--cache", str(workspace / "cache"), "--epochs", "2", "--seed", "1", *SMALL,
                 "--out", str(tmp_path)]) == 0
    assert sha(tmp_path / "weights.bin") == sha(workspace / "run" / "weights.bin")
    assert sha(tmp_path / "train_summary.json") == sha(workspace / "run" / "train_summary.json")


def test_train_focal_flags(workspace, tmp_path):
    assert main(["train", "--cache", str(workspace / "cache"), "--epochs", "1", "--loss", "focal",
                 "--gamma", "2", "--alpha", "0.25", *SMALL, "--out", str(tmp_path)]) == 0
    eff = read_config_file(tmp_path / CONFIG_FILE)
    assert (eff["loss.kind"], eff["loss.gamma"], eff["loss.alpha"]) == ("focal", "2.0", "0.25")


def test_train_single_class_cache(workspace, tmp_path):
    from apnea_screen.dsp import write_cache
    data = read_cache(workspace / "cache" / "train.apne")
    neg = [s for s in data.spectrograms() if s.label == 0]
    write_cache(tmp_path / "train.apne", neg)
    assert main(["train", "--cache", str(tmp_path), "--epochs", "1", *SMALL,
                 "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_evaluate_threshold_recorded(workspace, tmp_path):
    assert main(["evaluate", "--cache", str(workspace / "cache"), "--weights",
                 str(workspace / "run" / "weights.bin"), "--threshold", "0.635", "--out", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["threshold"] == 0.635 and metrics["objective"] == "threshold"
    assert (tmp_path / "pr_curve.csv").read_text().startswith("threshold,recall,precision\n")
    rows = list(csv.reader(open(tmp_path / "confusion.csv")))
    assert rows[1][1:] == [str(metrics["tp"]), str(metrics["fn"])]


def test_evaluate_default_sweep_and_bit_exact_reload(workspace, tmp_path):
    assert main(["evaluate", "--cache", str(workspace / "cache"), "--weights",
                 str(workspace / "run" / "weights.bin"), "--out", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["objective"] in ("recall_floor:0.9", "max_f1")
    assert metrics["objective"] != "recall_floor:0.9" or metrics["recall"] >= 0.9
    test = read_cache(workspace / "cache" / "test.apne")
    a = load_weights(workspace / "run" / "weights.bin").predict(test.x)
    b = load_weights(workspace / "run" / "weights.bin").predict(test.x)
    assert a.tobytes() == b.tobytes()


def test_evaluate_corrupt_weights(workspace, tmp_path, capsys):
    raw = (workspace / "run" / "weights.bin").read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(raw[:12] + b"{not json" + raw[21:])
    code = main(["evaluate", "--cache", str(workspace / "cache"), "--weights", str(bad), "--out", str(tmp_path)])
    assert code == EXIT_ARTIFACT
    assert "manifest" in capsys.readouterr().err
    bad.write_bytes(b"XXXX" + raw[4:])
    assert main(["evaluate", "--cache", str(workspace / "cache"), "--weights", str(bad),
                 "--out", str(tmp_path)]) == EXIT_ARTIFACT


def test_perfect_scores_report_full_recall():
    scores, labels = np.array([0.9, 0.8, 0.2, 0.1]), np.array([1, 1, 0, 0])
    report, how = choose_report(scores, labels, default_config())
    assert report.recall == 1.0 and how == "recall_floor:0.9"
    cfg = dict(default_config(), **{"eval.objective": "precision_floor:1.1"})
    report, how = choose_report(scores, labels, cfg)
    assert how == "max_f1" and report.f1 == 1.0


# -- ablate / report -----------------------------------------------------------------


def test_ablate_subset(workspace, tmp_path):
    assert main(["ablate", "--cache", str(workspace / "cache"), "--runs", "full,no_oversampling",
                 "--epochs", "1", *SMALL, "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0] == "configuration,accuracy_pct,precision_pct,recall_pct,f1_pct"
    assert [line.split(",")[0] for line in lines[1:]] == ["full", "no_oversampling"]
    meta = {m["configuration"]: m for m in json.loads((tmp_path / "ablation_runs.json").read_text())}
    bal = meta["no_oversampling"]["balanced_counts"]
    assert bal["apnea"] != bal["non_apnea"]
    assert meta["full"]["balanced_counts"]["apnea"] == meta["full"]["balanced_counts"]["non_apnea"]
    assert meta["full"]["seed"] != meta["no_oversampling"]["seed"]


def test_ablate_all_rows(workspace, tmp_path):
    assert main(["ablate", "--cache", str(workspace / "cache"), "--epochs", "1", *SMALL,
                 "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ablation.csv")))
    assert [r["configuration"] for r in rows] == ["full", "no_class_weighting", "no_oversampling",
                                                  "no_regularization"]
    assert all(0 <= float(r["recall_pct"]) <= 100 for r in rows)


def test_ablate_unknown_run(workspace, tmp_path):
    assert main(["ablate", "--cache", str(workspace / "cache"), "--runs", "full,bogus",
                 "--out", str(tmp_path)]) == EXIT_CONFIG


def test_report(workspace, tmp_path):
    paths = []
    for i, t in enumerate(("0.3", "0.5", "0.7")):
        out = tmp_path / f"run{i}"
        assert main(["evaluate", "--cache", str(workspace / "cache"), "--weights",
                     str(workspace / "run" / "weights.bin"), "--threshold", t, "--out", str(out)]) == 0
        paths.append(str(out / "metrics.json"))
    assert main(["report", *paths, "--out", str(tmp_path / "r3")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "r3" / "comparison.csv")))
    assert [r["run"] for r in rows] == ["run0", "run1", "run2"]
    assert [float(r["threshold"]) for r in rows] == [0.3, 0.5, 0.7]
    assert main(["report", paths[0], "--out", str(tmp_path / "r1")]) == 0
    assert len((tmp_path / "r1" / "comparison.csv").read_text().splitlines()) == 2
    assert main(["report", str(tmp_path / "missing.json"), "--out", str(tmp_path / "rx")]) == EXIT_DATA
