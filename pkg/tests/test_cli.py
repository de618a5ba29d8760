import json
import os
import subprocess
import sys

import pytest

from conattsd.cli import OUTPUT_DIR_ENV, main
from conattsd.data import load_dataset
from conattsd.training import load_checkpoint

SMALL = ["--hidden", "4", "--blocks", "1", "--heads", "2"]


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch, tmp_path):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
    monkeypatch.chdir(tmp_path)


def _synth(path="data.txt", *extra):
    assert main(["synth", "--n", "12", "--dims", "3,3,3", "--max-length", "3", "--out", path, *extra]) == 0


def test_synth_train_evaluate_end_to_end(tmp_path, capsys):
    assert main(["synth", "--n", "64", "--seed", "7", "--out", "data.txt"]) == 0
    assert len(load_dataset("data.txt")) == 64
    assert main(["train", "--data", "data.txt", "--epochs", "2", *SMALL]) == 0
    assert (tmp_path / "model.ckpt").exists()
    assert main(["evaluate", "--data", "data.txt", "--out", "metrics.json"]) == 0
    out = capsys.readouterr().out
    assert "epoch    2" in out and "F1" in out
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["support"] == [32, 32]


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--data", "x", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage: conattsd train" in err and "--bogus" in err
    assert main([]) == 1
    assert main(["fly"]) == 1


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "conattsd.cli", "--no-such-flag"], capture_output=True, text=True,
                          cwd=tmp_path)
    assert proc.returncode == 1 and "usage:" in proc.stderr


def test_data_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--data", "missing.txt"]) == 2
    (tmp_path / "bad.txt").write_text('{"format": "nope"}\n')
    assert main(["train", "--data", "bad.txt"]) == 2
    assert "not a conattsd-features file" in capsys.readouterr().err
    _synth()
    (tmp_path / "junk.ckpt").write_bytes(b"garbage")
    assert main(["evaluate", "--data", "data.txt", "--checkpoint", "junk.ckpt"]) == 2


def test_config_errors_exit_1(tmp_path):
    _synth()
    assert main(["train", "--data", "data.txt", "--heads", "7", *SMALL[:2]]) == 1
    assert main(["train", "--data", "data.txt", "--variant", "T+Q"]) == 1
    assert main(["train", "--data", "data.txt", "--train-sources", "synthetic"]) == 1
    assert main(["gradcheck", "--precision", "32"]) == 1


def test_config_file_sets_defaults_and_flags_override(tmp_path):
    _synth()
    (tmp_path / "cfg.json").write_text(json.dumps({"hidden": 6, "heads": 3, "blocks": 1, "epochs": 1}))
    assert main(["train", "--data", "data.txt", "--config", "cfg.json", "--out", "a.ckpt"]) == 0
    assert load_checkpoint("a.ckpt")[1].hidden == 6
    assert main(["train", "--data", "data.txt", "--config", "cfg.json", "--hidden", "9", "--out", "b.ckpt"]) == 0
    assert load_checkpoint("b.ckpt")[1].hidden == 9
    (tmp_path / "bad.json").write_text(json.dumps({"hiden": 6}))
    assert main(["train", "--data", "data.txt", "--config", "bad.json"]) == 1
    (tmp_path / "broken.json").write_text("{")
    assert main(["train", "--data", "data.txt", "--config", "broken.json"]) == 1


def test_output_dir_env(tmp_path, monkeypatch):
    out_dir = tmp_path / "results"
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(out_dir))
    _synth()
    assert (out_dir / "data.txt").exists() and not (tmp_path / "data.txt").exists()
    data = str(out_dir / "data.txt")
    assert main(["train", "--data", data, "--epochs", "1", *SMALL]) == 0
    assert (out_dir / "model.ckpt").exists()
    assert main(["evaluate", "--data", data, "--out", "sub/m.json"]) == 0
    assert (out_dir / "sub" / "m.json").exists()


def test_only_declared_outputs_are_written(tmp_path):
    _synth()
    before = set(os.listdir(tmp_path))
    assert main(["train", "--data", "data.txt", "--epochs", "1", *SMALL, "--out", "m.ckpt",
                 "--history", "h.json"]) == 0
    assert main(["evaluate", "--data", "data.txt", "--checkpoint", "m.ckpt"]) == 0
    assert set(os.listdir(tmp_path)) - before == {"m.ckpt", "h.json"}


def test_train_is_deterministic(tmp_path):
    _synth()
    for name in ("a", "b"):
        assert main(["train", "--data", "data.txt", "--epochs", "2", *SMALL, "--seed", "3",
                     "--out", f"{name}.ckpt", "--history", f"{name}.json"]) == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()


def test_predict_writes_one_line_per_target(tmp_path, capsys):
    _synth()
    assert main(["train", "--data", "data.txt", "--epochs", "1", *SMALL]) == 0
    capsys.readouterr()
    assert main(["predict", "--data", "data.txt"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert len(rows) == 12
    for row, conv in zip(rows, load_dataset("data.txt").conversations):
        assert row["id"] == conv.id and row["utterance"] == len(conv) - 1
        assert row["label"] == int(row["p_sarcastic"] > 0.5)


def test_speaker_independent_training_and_ablation(tmp_path, capsys):
    _synth("shows.txt", "--sources", "3")
    assert main(["train", "--data", "shows.txt", "--train-sources", "show0,show1", "--test-sources", "show2",
                 "--epochs", "2", *SMALL, "--keep", "best"]) == 0
    assert "val F1" in capsys.readouterr().out
    assert main(["ablate", "--data", "shows.txt", "--train-sources", "show0,show1", "--test-sources", "show2",
                 "--grid", "T,T→A", "--seeds", "0,1", "--epochs", "1", *SMALL]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[1].split()[0] == "T"
    records = [json.loads(line) for line in (tmp_path / "ablation.jsonl").read_text().splitlines()]
    assert [(r["spec"], r["seed"]) for r in records] == [("T", 0), ("T", 1), ("T→A", 0), ("T→A", 1),
                                                          ("T", "mean"), ("T→A", "mean")]
    assert main(["ablate", "--data", "shows.txt", "--grid", "T"]) == 1
    assert main(["ablate", "--data", "shows.txt", "--test-data", "shows.txt", "--grid", "T,A+V|T→A"]) == 1


def test_sidecar_synth(tmp_path):
    _synth("side.txt", "--sidecar")
    assert (tmp_path / "side.txt.bin").exists()
    assert len(load_dataset("side.txt")) == 12


def test_gradcheck_subset_output(monkeypatch, capsys):
    from conattsd import gradcheck

    real = gradcheck.run_suite
    monkeypatch.setattr(gradcheck, "run_suite",
                        lambda seed, eps: real(seed=seed, eps=eps, components=["linear", "softmax"]))
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert all(line.startswith("PASS") for line in lines[:-1])
    assert lines[-1].startswith("worst relative error")
    assert main(["gradcheck", "--tolerance", "1e-30"]) == 3
