import csv
import json
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

import dircr.trainer as tr
from dircr.cli import main, parse_rules, resolve_config
from dircr.errors import ConfigError
from dircr.puzzle_gen import dataset_digest, load_dataset

TINY = ["--set", "channels=8", "--set", "K=1", "--set", "n_heads=2", "--set", "batch_size=8", "--set", "rclm.out_dim=16"]


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["-q", "gen", "--count", "24", "--seed", "1", "--size", "32", "--out", str(root / "train")]) == 0
    assert main(["-q", "gen", "--count", "16", "--seed", "2", "--split", "test", "--out", str(root / "test")]) == 0
    return root


def _pgm(path: Path) -> np.ndarray:
    # independent reader: four whitespace-separated header tokens, then raw bytes
    data = path.read_bytes()
    tokens = data.split(maxsplit=4)
    assert tokens[0] == b"P5" and tokens[3] == b"255"
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[-w * h :], dtype=np.uint8).reshape(h, w)


# -- gen -----------------------------------------------------------------------
def test_gen_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["-q", "gen", "--count", "100", "--seed", "1", "--size", "32", "--out", str(tmp_path / name)]) == 0
    for f in ("manifest.json", "puzzles.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_rule_filter(tmp_path, capsys):
    assert main(["-q", "gen", "--count", "30", "--rules", "constant", "--out", str(tmp_path / "c")]) == 0
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert set(manifest["rule_histogram"]) == {"Constant"}
    assert json.loads(capsys.readouterr().out.strip())["rule_histogram"] == {"Constant": 30}


@pytest.mark.parametrize(
    "argv",
    [
        ["gen", "--count", "0", "--out", "x"],
        ["gen", "--count", "5", "--rules", "bogus", "--out", "x"],
        ["gen", "--count", "5", "--size", "8", "--out", "x"],
        ["gen", "--count", "5", "--n-rules", "4", "--out", "x"],
        ["gen", "--count", "five", "--out", "x"],
        ["gen", "--out", "x"],
        ["frobnicate"],
    ],
)
def test_bad_flags_exit_2(tmp_path, argv):
    argv = [a if a != "x" else str(tmp_path / "x") for a in argv]
    assert main(["-q"] + argv) == 2


def test_parse_rules_aliases():
    assert parse_rules("constant, Distribute_Three,progression") == ("Constant", "DistributeThree", "Progression")
    with pytest.raises(ConfigError):
        parse_rules("")


# -- config --------------------------------------------------------------------
def test_config_precedence(tmp_path):
    (tmp_path / "c.toml").write_text("lr = 0.01\nepochs = 3\n[rclm]\ntemperature = 0.5\n[gen]\nn_rules = 2\n")
    cfg = resolve_config(tmp_path / "c.toml", ["lr=0.02", "rclm.temperature=0.2"])
    assert cfg["lr"] == 0.02 and cfg["epochs"] == 3
    assert cfg["rclm"]["temperature"] == 0.2 and cfg["gen"]["n_rules"] == 2
    (tmp_path / "c.json").write_text(json.dumps({"seed": 5, "rclm": {"loss_weight": 0.0}}))
    cfg = resolve_config(tmp_path / "c.json")
    assert cfg["seed"] == 5 and cfg["rclm"]["loss_weight"] == 0.0


@pytest.mark.parametrize(
    "overrides",
    [["lrr=1"], ["rclm.tau=0.1"], ["gen.size=32"], ["epochs=2.5"], ["use_rclm=1"], ["rclm=3"], ["lr"]],
)
def test_bad_overrides_rejected(overrides):
    with pytest.raises(ConfigError):
        resolve_config(None, overrides)


def test_unknown_key_in_file_exit_2(tmp_path, datasets):
    (tmp_path / "c.toml").write_text("learning_rate = 0.1\n")
    argv = ["-q", "train", "--train", str(datasets / "train"), "--out", str(tmp_path / "r"), "--config", str(tmp_path / "c.toml")]
    assert main(argv) == 2


# -- train / eval --------------------------------------------------------------
def test_train_then_eval(tmp_path, datasets):
    before = dataset_digest(datasets / "train")
    out = tmp_path / "run"
    argv = ["-q", "train", "--train", str(datasets / "train"), "--val", str(datasets / "test"), "--out", str(out)]
    assert main(argv + TINY + ["--set", "epochs=2", "--set", "rclm.temperature=0.2"]) == 0
    assert dataset_digest(datasets / "train") == before

    echoed = json.loads((out / "config.json").read_text())
    assert echoed["rclm"]["temperature"] == 0.2 and echoed["channels"] == 8
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,train_ce_loss,train_rclm_loss,val_accuracy,pl_accept_rate,pl_correct_rate,wall_time_s"
    assert (out / "curves.png").read_bytes()[:4] == b"\x89PNG"

    ev = tmp_path / "eval"
    assert main(["-q", "eval", "--checkpoint", str(out / "last.ckpt"), "--data", str(datasets / "test"), "--out", str(ev)]) == 0
    summary = json.loads((ev / "summary.json").read_text())
    assert 0.0 <= summary["accuracy"] <= 1.0 and summary["n"] == 16
    with open(ev / "predictions.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 16
    assert np.mean([int(r["correct"]) for r in rows]) == pytest.approx(summary["accuracy"])


def test_train_resume_matches_uninterrupted(tmp_path, datasets):
    base = ["-q", "train", "--train", str(datasets / "train"), "--val", str(datasets / "test")] + TINY
    assert main(base + ["--out", str(tmp_path / "full"), "--set", "epochs=2"]) == 0
    assert main(base + ["--out", str(tmp_path / "part"), "--set", "epochs=1"]) == 0
    assert main(base + ["--out", str(tmp_path / "part"), "--set", "epochs=2", "--resume"]) == 0

    def strip_time(path):
        return [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()]

    assert strip_time(tmp_path / "full" / "metrics.csv") == strip_time(tmp_path / "part" / "metrics.csv")
    # changing anything but epochs on resume is refused
    assert main(base + ["--out", str(tmp_path / "part"), "--set", "epochs=3", "--set", "lr=0.5", "--resume"]) == 2


def test_train_size_mismatch_exit_2(tmp_path, datasets):
    argv = ["-q", "train", "--train", str(datasets / "train"), "--out", str(tmp_path / "r"), "--set", "image_size=48"]
    assert main(argv) == 2


def test_io_failures_exit_3(tmp_path, datasets):
    assert main(["-q", "train", "--train", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 3
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    argv = ["-q", "eval", "--checkpoint", str(tmp_path / "bad.ckpt"), "--data", str(datasets / "test"), "--out", str(tmp_path / "e")]
    assert main(argv) == 3


def test_nonfinite_loss_exit_4(tmp_path, datasets, monkeypatch):
    monkeypatch.setattr(tr, "classification_loss", lambda logits, y: logits.sum() * float("nan"))
    argv = ["-q", "train", "--train", str(datasets / "train"), "--out", str(tmp_path / "r")] + TINY
    assert main(argv) == 4
    assert "error" in json.loads((tmp_path / "r" / "summary.json").read_text())


# -- ablate --------------------------------------------------------------------
def test_ablate_table3(tmp_path, datasets, capsys):
    out = tmp_path / "abl"
    argv = ["-q", "ablate", "--train", str(datasets / "train"), "--test", str(datasets / "test")]
    argv += ["--grid", "table3", "--seeds", "0", "--out", str(out), "--set", "epochs=1"] + TINY
    assert main(argv) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert len(lines) == 1 + 9
    assert [line.split(",")[0] for line in lines[1:]] == [
        "2-to-1", "8-to-1", "2-to-1+RCLM", "2-to-1+8-to-1", "2-to-1+8-to-1+RCLM", "K=1", "K=2", "K=3", "K=4",
    ]
    report = json.loads((out / "ablation.json").read_text())
    assert set(report["trend"]["checks"]) == {"full_ge_both", "both_ge_single", "full_ge_local"}
    assert (out / "ablation.png").exists() and (out / "config.json").exists()


def test_ablate_bad_seeds(tmp_path, datasets):
    argv = ["-q", "ablate", "--train", str(datasets / "train"), "--test", str(datasets / "test"), "--seeds", "a,b", "--out", str(tmp_path)]
    assert main(argv) == 2


# -- inspect -------------------------------------------------------------------
def test_inspect_matches_metadata_and_pgm_roundtrip(tmp_path, datasets, capsys):
    puzzles = load_dataset(datasets / "test")
    assert main(["inspect", "--data", str(datasets / "test"), "--index", "5", "--pgm-dir", str(tmp_path / "pgm"), "--png", str(tmp_path / "p.png")]) == 0
    out = capsys.readouterr().out
    p = puzzles[5]
    rules = json.loads(re.search(r"^rules: (.*)$", out, re.M).group(1))
    assert rules == [r.to_dict() for r in p.rules]
    assert f"answer_index: {p.answer_index}" in out
    stored = np.concatenate([p.context, p.candidates])
    for i in range(16):
        assert _pgm(tmp_path / "pgm" / f"panel_{i:02d}.pgm").tobytes() == stored[i].tobytes()
    assert (tmp_path / "p.png").read_bytes()[:4] == b"\x89PNG"


@pytest.mark.parametrize("index", ["16", "-1"])
def test_inspect_out_of_range(datasets, index):
    assert main(["-q", "inspect", "--data", str(datasets / "test"), "--index", index]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dircr", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("dircr ")
