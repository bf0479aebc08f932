import json

import numpy as np
import pytest

from ceat.checkpoint import load_checkpoint, save_checkpoint
from ceat.cli import main

CONFIG = """\
synthetic_classes: 6
synthetic_train_per_class: 16
synthetic_test_per_class: 6
synthetic_size: 8
base_classes: 2
per_task: 2
embed_dim: 16
depth: 3
num_heads: 2
mlp_ratio: 2
plain_blocks: 1
batch_size: 16
epochs_base: 1
epochs_incremental: 1
probe_inputs: 4
"""


def run(capsys, *argv):
    code = main(list(argv))
    return code, json.loads(capsys.readouterr().out)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "cfg.yaml"
    cfg.write_text(CONFIG + f"output_dir: {root / 'out'}\n")
    assert main(["train", str(cfg)]) == 0
    return root


def test_train_writes_artifacts(trained):
    for method in ("ceat", "finetune"):
        d = trained / "out" / method
        assert (d / "report.json").exists()
        assert (d / "accuracy_matrix.csv").exists()
        assert (d / "accuracy_series.csv").exists()
        assert sorted(p.name for p in (d / "checkpoints").iterdir()) == ["task0.ckpt", "task1.ckpt", "task2.ckpt"]


def test_report_replays_csv(trained, capsys):
    code, out = run(capsys, "report", str(trained / "out"))
    assert code == 0
    assert set(out["runs"]) == {"ceat", "finetune"}
    rep = json.loads((trained / "out" / "ceat" / "report.json").read_text())
    assert out["runs"]["ceat"]["average_forgetting"] == rep["average_forgetting"]


def test_report_detects_tampered_json(trained, tmp_path, capsys):
    src = trained / "out" / "ceat"
    for name in ("report.json", "accuracy_matrix.csv", "accuracy_series.csv"):
        (tmp_path / name).write_bytes((src / name).read_bytes())
    rep = json.loads((tmp_path / "report.json").read_text())
    rep["average_forgetting"] += 0.125
    (tmp_path / "report.json").write_text(json.dumps(rep))
    code, out = run(capsys, "report", str(tmp_path))
    assert code == 2 and out["error"] == "metric_mismatch"


def test_eval_matches_report(trained, capsys, tmp_path):
    code, _ = run(capsys, "synth", str(tmp_path), "--classes", "6", "--train-per-class", "16",
                  "--test-per-class", "6", "--size", "8")
    assert code == 0
    ckpt = trained / "out" / "ceat" / "checkpoints" / "task2.ckpt"
    code, out = run(capsys, "eval", str(ckpt), str(tmp_path / "test.ceatds"))
    assert code == 0 and out["samples"] == 36
    rep = json.loads((trained / "out" / "ceat" / "report.json").read_text())
    assert [out["per_task"][str(j)] for j in range(3)] == rep["accuracy_matrix"][-1]


def test_verify_absorb(trained, capsys):
    ckpt = trained / "out" / "ceat" / "checkpoints" / "task1.ckpt"
    code, out = run(capsys, "verify-absorb", str(ckpt))
    assert code == 0 and out["residual"] == 0.0
    code, out = run(capsys, "verify-absorb", str(ckpt), "--random-psi")
    assert code == 0 and 0 < out["residual"] <= 1e-5
    code, out = run(capsys, "verify-absorb", str(ckpt), "--random-psi", "--precision", "float64")
    assert code == 0 and out["residual"] <= 1e-10
    code, out = run(capsys, "verify-absorb", str(ckpt), "--random-psi", "--tolerance", "1e-30")
    assert code == 2 and out["error"] == "absorption_residual"


def test_checkpoint_resave_is_byte_identical(trained, tmp_path):
    ckpt = trained / "out" / "ceat" / "checkpoints" / "task2.ckpt"
    meta, arrays = load_checkpoint(ckpt)
    save_checkpoint(tmp_path / "again.ckpt", meta, arrays)
    assert (tmp_path / "again.ckpt").read_bytes() == ckpt.read_bytes()


def test_gradcheck_command(capsys):
    code, out = run(capsys, "gradcheck")
    assert code == 0
    assert set(out["max_relative_error"]) == {"bce", "pcl", "ld", "fd", "ipf", "total"}
    assert max(out["max_relative_error"].values()) < 1e-4


def test_errors_are_machine_readable(tmp_path, capsys):
    code, out = run(capsys, "eval", str(tmp_path / "missing.ckpt"), str(tmp_path / "x"))
    assert code == 1 and out["error"] == "FileNotFoundError"
    bad = tmp_path / "bad.yaml"
    bad.write_text("epochs: 3\n")
    code, out = run(capsys, "train", str(bad))
    assert code == 1 and out["error"] == "ConfigError" and "epochs" in out["message"]
    (tmp_path / "junk.ckpt").write_bytes(b"garbage" * 4)
    code, out = run(capsys, "verify-absorb", str(tmp_path / "junk.ckpt"))
    assert code == 1 and out["error"] == "CheckpointError"


def test_output_dir_env_override(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(CONFIG + "run_baseline: false\nnum_tasks: 1\n")
    monkeypatch.setenv("CEAT_OUTPUT_DIR", str(tmp_path / "env-out"))
    code, out = run(capsys, "train", str(cfg))
    assert code == 0
    assert (tmp_path / "env-out" / "ceat" / "report.json").exists()
    assert np.isfinite(out["runs"]["ceat"]["average_incremental_accuracy"])
