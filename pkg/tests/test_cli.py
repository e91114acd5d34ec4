import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from otclust.cli import main
from otclust.dataset import (
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    make_split,
    save_dataset,
)
from otclust.errors import DivergenceError


def run(argv):
    return main([str(a) for a in argv])


def write_split_dataset(path, seed=0, class_count=4, per_class=15, dim=6,
                        spread=0.2, labeled_fraction=0.5, known_ratio=0.5):
    full = generate_synthetic(SyntheticSpec(
        class_count=class_count, dim=dim, samples_per_class=per_class,
        cluster_spread=spread, seed=seed,
    ))
    split = make_split(full, SplitSpec(
        labeled_fraction=labeled_fraction, known_class_ratio=known_ratio, seed=seed,
    ))
    save_dataset(split, str(path), "csv")
    return split


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def test_gen_data_writes_dataset_and_manifest(tmp_path):
    out = tmp_path / "data.csv"
    code = run(["gen-data", "--classes", 3, "--dim", 4, "--per-class", 5,
                "--seed", 1, "--output", out])
    assert code == 0
    data = load_dataset(str(out), "csv")
    assert data.sample_count == 15
    manifest = json.loads((tmp_path / "data.csv.manifest.json").read_text())
    assert manifest["dataset"]["sha256"] == hashlib.sha256(out.read_bytes()).hexdigest()
    assert manifest["command"] == "gen-data"

    again = tmp_path / "again.csv"
    assert run(["gen-data", "--classes", 3, "--dim", 4, "--per-class", 5,
                "--seed", 1, "--output", again]) == 0
    assert out.read_bytes() == again.read_bytes()


def test_gen_data_split_flags(tmp_path):
    out = tmp_path / "split.csv"
    code = run(["gen-data", "--classes", 4, "--dim", 5, "--per-class", 10,
                "--seed", 0, "--labeled-fraction", 0.5, "--known-ratio", 0.5,
                "--output", out])
    assert code == 0
    data = load_dataset(str(out), "csv")
    assert data.class_count_known == 2
    assert data.class_count_novel == 2
    assert 0 < data.labeled_mask.sum() < data.sample_count


def test_gen_data_rejects_single_class(tmp_path, capsys):
    code = run(["gen-data", "--classes", 1, "--output", tmp_path / "x.csv"])
    assert code == 2
    assert "class" in capsys.readouterr().err.lower()


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_writes_checkpoint_telemetry_manifest(tmp_path):
    data_path = tmp_path / "data.csv"
    write_split_dataset(data_path)
    out_dir = tmp_path / "run"
    code = run(["train", data_path, "--epochs", 2, "--batch-size", 32,
                "--output-dir", out_dir])
    assert code == 0
    telemetry = (out_dir / "telemetry.csv").read_text().splitlines()
    assert telemetry[0] == "epoch,pl_acc,loss_intra,loss_inter,loss_ce,loss_total,residual,prior_entropy"
    assert len(telemetry) == 3
    checkpoint = json.loads((out_dir / "checkpoint.json").read_text())
    assert checkpoint["epoch"] == 2
    assert checkpoint["known_count"] == 2
    manifest = json.loads((out_dir / "manifest.json").read_text())
    assert manifest["config"]["epochs"] == 2
    assert manifest["config"]["eta"] == 0.05
    assert manifest["config"]["alpha"] == 0.7
    assert json.loads((out_dir / "telemetry.json").read_text())[0]["epoch"] == 1


def test_train_zero_epochs(tmp_path):
    data_path = tmp_path / "data.csv"
    write_split_dataset(data_path)
    out_dir = tmp_path / "run0"
    assert run(["train", data_path, "--epochs", 0, "--output-dir", out_dir]) == 0
    assert (out_dir / "telemetry.csv").read_text().splitlines()[1:] == []
    assert json.loads((out_dir / "checkpoint.json").read_text())["epoch"] == 0


def test_config_file_and_flag_precedence(tmp_path):
    data_path = tmp_path / "data.csv"
    write_split_dataset(data_path)
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"epochs": 3, "tau": 0.2, "batch_size": 16}))
    out_dir = tmp_path / "run"
    assert run(["train", data_path, "--config", cfg_file, "--epochs", 1,
                "--output-dir", out_dir]) == 0
    config = json.loads((out_dir / "manifest.json").read_text())["config"]
    assert config["epochs"] == 1
    assert config["tau"] == 0.2
    assert config["batch_size"] == 16
    assert config["eta"] == 0.05


def test_toml_config_file(tmp_path):
    data_path = tmp_path / "data.csv"
    write_split_dataset(data_path)
    cfg_file = tmp_path / "cfg.toml"
    cfg_file.write_text('epochs = 4\nablation = "no_ot"\nbatch_size = 16\n')
    out_dir = tmp_path / "run"
    assert run(["train", data_path, "--config", cfg_file, "--output-dir", out_dir]) == 0
    config = json.loads((out_dir / "manifest.json").read_text())["config"]
    assert config["epochs"] == 4
    assert config["ablation"] == "no_ot"


def test_manifest_reproduces_run(tmp_path):
    data_path = tmp_path / "data.csv"
    write_split_dataset(data_path)
    first = tmp_path / "first"
    second = tmp_path / "second"
    assert run(["train", data_path, "--epochs", 2, "--batch-size", 32,
                "--seed", 3, "--output-dir", first]) == 0
    assert run(["train", data_path, "--config", first / "manifest.json",
                "--output-dir", second]) == 0
    assert (first / "telemetry.csv").read_bytes() == (second / "telemetry.csv").read_bytes()
    assert (first / "checkpoint.json").read_bytes() == (second / "checkpoint.json").read_bytes()


def test_train_missing_dataset_gives_io_exit_code(tmp_path):
    assert run(["train", tmp_path / "missing.csv"]) == 4


def test_divergence_maps_to_exit_code_three(tmp_path, monkeypatch):
    data_path = tmp_path / "data.csv"
    write_split_dataset(data_path)

    def explode(dataset, config):
        raise DivergenceError("boom")

    monkeypatch.setattr("otclust.cli.train", explode)
    assert run(["train", data_path, "--output-dir", tmp_path / "run"]) == 3


def test_train_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as wrapped:
        main(["train", "--help"])
    assert wrapped.value.code == 0
    text = capsys.readouterr().out
    for token in ("0.05", "0.07", "0.7", "0.95", "0.99"):
        assert token in text


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def train_checkpoint(tmp_path, data_path, seed, epochs=5):
    out_dir = tmp_path / f"run{seed}"
    assert run(["train", data_path, "--epochs", epochs, "--batch-size", 32,
                "--seed", seed, "--output-dir", out_dir]) == 0
    return out_dir / "checkpoint.json"


def test_eval_perfect_on_zero_spread_data(tmp_path, capsys):
    data_path = tmp_path / "easy.csv"
    write_split_dataset(data_path, spread=0.0, class_count=3, per_class=12)
    ckpt = train_checkpoint(tmp_path, data_path, seed=0)
    report_path = tmp_path / "report.json"
    assert run(["eval", data_path, "--checkpoint", ckpt, "--output", report_path]) == 0
    report = json.loads(report_path.read_text())
    assert report["mean"]["acc"] == 1.0
    printed = json.loads(capsys.readouterr().out)
    assert printed["mean"]["acc"] == 1.0


def test_eval_multiple_checkpoints_adds_mean_row(tmp_path):
    data_path = tmp_path / "data.csv"
    write_split_dataset(data_path)
    a = train_checkpoint(tmp_path, data_path, seed=0, epochs=2)
    b = train_checkpoint(tmp_path, data_path, seed=1, epochs=2)
    report_path = tmp_path / "report.json"
    assert run(["eval", data_path, "--checkpoint", a, b, "--output", report_path]) == 0
    report = json.loads(report_path.read_text())
    assert len(report["per_seed"]) == 2
    accs = [row["acc"] for row in report["per_seed"]]
    assert report["mean"]["acc"] == pytest.approx(np.mean(accs))


def test_eval_dimension_mismatch_names_both_dims(tmp_path, capsys):
    data_path = tmp_path / "data.csv"
    write_split_dataset(data_path, dim=6)
    ckpt = train_checkpoint(tmp_path, data_path, seed=0, epochs=1)
    other_path = tmp_path / "other.csv"
    write_split_dataset(other_path, dim=4)
    assert run(["eval", other_path, "--checkpoint", ckpt]) == 2
    err = capsys.readouterr().err
    assert "6" in err and "4" in err


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def test_sweep_emits_long_format_rows(tmp_path):
    data_path = tmp_path / "full.csv"
    full = generate_synthetic(SyntheticSpec(
        class_count=4, dim=6, samples_per_class=15, cluster_spread=0.2, seed=0,
    ))
    save_dataset(full, str(data_path), "csv")
    out = tmp_path / "sweep.csv"
    code = run(["sweep", data_path, "--ratios", "0.5,1.0", "--seeds", "0,1",
                "--epochs", 2, "--batch-size", 32, "--labeled-fraction", 0.2,
                "--output", out])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "ratio,seed,acc,nmi,ari,acc_known,acc_novel"
    assert len(lines) == 5
    for line in lines[1:]:
        ratio, seed, acc, nmi, ari, acc_known, acc_novel = line.split(",")
        assert 0.0 <= float(acc) <= 1.0
        if float(ratio) == 1.0:
            assert acc_novel == ""
        else:
            assert 0.0 <= float(acc_novel) <= 1.0


# ---------------------------------------------------------------------------
# pseudo-label
# ---------------------------------------------------------------------------


def test_pseudo_label_dumps_plan_and_labels(tmp_path):
    data_path = tmp_path / "data.csv"
    split = write_split_dataset(data_path)
    out = tmp_path / "pl.json"
    assert run(["pseudo-label", data_path, "--seed", 0, "--output", out]) == 0
    blob = json.loads(out.read_text())
    unlabeled = int((~split.labeled_mask).sum())
    assert len(blob["labels"]) == unlabeled
    assert len(blob["indices"]) == unlabeled
    plan = np.array(blob["plan"])
    assert plan.shape == (unlabeled, split.class_count)
    assert plan.sum() == pytest.approx(1.0, abs=1e-9)
    assert all(0 <= lab < split.class_count for lab in blob["labels"])


def test_pseudo_label_accepts_checkpoint(tmp_path):
    data_path = tmp_path / "data.csv"
    write_split_dataset(data_path)
    ckpt = train_checkpoint(tmp_path, data_path, seed=0, epochs=2)
    out = tmp_path / "pl.json"
    assert run(["pseudo-label", data_path, "--checkpoint", ckpt, "--output", out]) == 0
    blob = json.loads(out.read_text())
    assert blob["labels"]


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


def test_output_root_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("OTCLUST_OUTPUT_ROOT", str(tmp_path))
    assert run(["gen-data", "--classes", 3, "--dim", 4, "--per-class", 5,
                "--output", "rooted.csv"]) == 0
    assert (tmp_path / "rooted.csv").exists()


def test_unknown_command_exits_two():
    with pytest.raises(SystemExit) as wrapped:
        main(["frobnicate"])
    assert wrapped.value.code == 2


def test_module_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "otclust", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "gen-data" in proc.stdout
