import copy
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

import dircr.trainer as tr
from dircr.errors import ConfigError, CorruptFile, EmptyDataset, NonFiniteLoss, VersionMismatch
from dircr.puzzle_gen import GenConfig, generate_dataset
from dircr.rclm import ProjectionConfig
from dircr.trainer import (
    GRIDS,
    METRICS_HEADER,
    AblationRow,
    Dataset,
    MetricsRecord,
    TrainConfig,
    Trainer,
    ablation_trend,
    epoch_order,
    load_checkpoint,
    read_checkpoint,
    read_metrics_csv,
    run_ablation,
    save_checkpoint,
    write_metrics_csv,
)

TINY = TrainConfig(
    batch_size=8,
    epochs=2,
    K=1,
    channels=8,
    n_heads=2,
    warmup_epochs=1,
    rclm=ProjectionConfig(out_dim=16),
)


@pytest.fixture(scope="module")
def data():
    return Dataset.from_puzzles(generate_dataset(24, seed=8, cfg=GenConfig(32, 1)))


def losses_of(history):
    return [(r.train_ce_loss, r.train_rclm_loss, r.val_accuracy, r.pl_accept_rate) for r in history]


# -- config --------------------------------------------------------------------
def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.K, cfg.warmup_epochs) == (1e-3, 1e-5, 3, 3)
    assert (cfg.batch_size, cfg.image_size, cfg.channels) == (32, 32, 32)
    assert tr.FULL_SCALE.batch_size == 128 and tr.FULL_SCALE.image_size == 80


def test_config_rejects_no_paths():
    with pytest.raises(ConfigError):
        TrainConfig(use_local=False, use_global=False)


def test_config_roundtrip_and_unknown_keys():
    cfg = replace(TINY, rclm=ProjectionConfig(temperature=0.3))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"rclm": {"tau": 0.1}})


def test_epoch_order_deterministic():
    assert np.array_equal(epoch_order(3, 1, 50), epoch_order(3, 1, 50))
    assert not np.array_equal(epoch_order(3, 1, 50), epoch_order(3, 2, 50))
    assert sorted(epoch_order(0, 0, 50)) == list(range(50))


# -- steps -------------------------------------------------------------------
def test_zero_lr_leaves_parameters_unchanged(data):
    t = Trainer(replace(TINY, lr=0.0), data)
    before = copy.deepcopy(dict(t.model.named_parameters()))
    t.train_step(*data.batch(np.arange(8)), epoch=0)
    for name, p in t.model.named_parameters():
        assert torch.equal(p, before[name]), name


def test_decoupled_weight_decay_on_zero_gradient(data):
    # before warmup the projection head receives exactly zero gradient
    cfg = replace(TINY, lr=0.01, weight_decay=0.5)
    t = Trainer(cfg, data)
    before = {n: p.detach().clone() for n, p in t.model.projection.named_parameters()}
    t.train_step(*data.batch(np.arange(8)), epoch=0)
    factor = 1 - cfg.lr * cfg.weight_decay
    for n, p in t.model.projection.named_parameters():
        assert torch.count_nonzero(p.grad) == 0
        torch.testing.assert_close(p.detach(), before[n] * factor, atol=0, rtol=1e-7)


def test_trainer_does_not_touch_global_rng(data):
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    t = Trainer(TINY, data)
    t.train_step(*data.batch(np.arange(8)))
    assert torch.equal(torch.rand(3), expected)


def test_identical_runs_identical_steps(data):
    a, b = Trainer(TINY, data), Trainer(TINY, data)
    for start in (0, 8, 16):
        x, y = data.batch(np.arange(start, start + 8))
        assert a.train_step(x, y, 2) == b.train_step(x, y, 2)


def test_nonfinite_loss_raises(data, monkeypatch):
    monkeypatch.setattr(tr, "classification_loss", lambda logits, y: logits.sum() * float("nan"))
    with pytest.raises(NonFiniteLoss):
        Trainer(TINY, data).train_step(*data.batch(np.arange(8)))


def test_rclm_zero_before_warmup(data):
    t = Trainer(replace(TINY, warmup_epochs=2, epochs=2), data, data)
    hist = t.fit()
    assert [r.train_rclm_loss for r in hist] == [0.0, 0.0]
    assert [r.pl_accept_rate for r in hist] == [0.0, 0.0]
    assert not t.rclm_active(1) and t.rclm_active(2)
    assert not Trainer(replace(TINY, use_rclm=False), data).rclm_active(10)


def test_two_phase_uses_frozen_teacher(data):
    t = Trainer(replace(TINY, rclm_mode="two_phase", warmup_epochs=1, epochs=2), data)
    t.fit(1)
    assert t.teacher is None
    t.fit(2)
    assert t.teacher is not None and not t.teacher.training
    teacher, student = t.teacher.encoder.parameters(), t.model.encoder.parameters()
    assert not any(torch.equal(a, b) for a, b in zip(teacher, student))


def test_empty_dataset_errors():
    with pytest.raises(EmptyDataset):
        Dataset.from_puzzles([])
    empty = Dataset(np.zeros((0, 16, 32, 32), np.uint8), np.zeros(0))
    with pytest.raises(EmptyDataset):
        Trainer(TINY, empty).train_epoch()


def test_evaluate_in_unit_interval(data):
    t = Trainer(TINY, data)
    acc = t.evaluate(data)
    assert 0.0 <= acc <= 1.0
    assert t.predict(data).shape == (len(data),)


def test_desk_training_drops_below_chance_plateau():
    data = Dataset.from_puzzles(generate_dataset(512, seed=77, cfg=GenConfig(32, 1)))
    t = Trainer(TrainConfig(epochs=13, use_rclm=False), data)
    steps = 0
    last = []
    while steps < 200:
        order = epoch_order(0, t.epoch, len(data))
        for start in range(0, len(order), 32):
            if steps == 200:
                break
            s = t.train_step(*data.batch(order[start : start + 32]), epoch=t.epoch)
            last = (last + [s["ce"]])[-16:]
            steps += 1
        t.epoch += 1
    assert np.mean(last) < math.log(8)


# -- metrics -------------------------------------------------------------------
def test_metrics_csv_roundtrip(tmp_path):
    recs = [MetricsRecord(0, 2.07, 0.0, 0.25, 0.0, 0.0, 1.5), MetricsRecord(1, 1.9, 0.01, 0.5, 0.3, 0.9, 1.4)]
    write_metrics_csv(recs, tmp_path / "m.csv")
    head = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert head == "epoch,train_ce_loss,train_rclm_loss,val_accuracy,pl_accept_rate,pl_correct_rate,wall_time_s"
    assert tuple(head.split(",")) == METRICS_HEADER
    assert read_metrics_csv(tmp_path / "m.csv") == recs


# -- checkpoints ---------------------------------------------------------------
def test_checkpoint_roundtrip(tmp_path, data):
    t = Trainer(TINY, data, data)
    t.fit(1)
    path = save_checkpoint(t, tmp_path / "a.ckpt")
    back = load_checkpoint(path, data, data)
    assert back.epoch == 1 and back.cfg == t.cfg
    for (n, a), b in zip(t.model.state_dict().items(), back.model.state_dict().values()):
        assert torch.equal(a, b), n
    assert losses_of(back.history) == losses_of(t.history)


def test_resume_matches_uninterrupted(tmp_path, data):
    cfg = replace(TINY, epochs=3, warmup_epochs=1)
    full = Trainer(cfg, data, data)
    full.fit()

    part = Trainer(cfg, data, data)
    part.fit(2, out_dir=tmp_path)
    del part
    resumed = load_checkpoint(tmp_path / "last.ckpt", data, data)
    resumed.fit()
    assert losses_of(resumed.history) == losses_of(full.history)
    for a, b in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.equal(a, b)


def test_checkpoint_corruption(tmp_path, data):
    path = save_checkpoint(Trainer(TINY, data), tmp_path / "c.ckpt")
    blob = path.read_bytes()

    (tmp_path / "trunc.ckpt").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CorruptFile):
        read_checkpoint(tmp_path / "trunc.ckpt")

    (tmp_path / "head.ckpt").write_bytes(blob[:12])
    with pytest.raises(CorruptFile):
        read_checkpoint(tmp_path / "head.ckpt")

    flipped = bytearray(blob)
    flipped[-10] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CorruptFile):
        read_checkpoint(tmp_path / "flip.ckpt")

    magic = bytearray(blob)
    magic[0:5] = b"XXXXX"
    (tmp_path / "magic.ckpt").write_bytes(bytes(magic))
    with pytest.raises(CorruptFile):
        read_checkpoint(tmp_path / "magic.ckpt")

    versioned = bytearray(blob)
    versioned[len(tr.CKPT_MAGIC)] = 99
    (tmp_path / "ver.ckpt").write_bytes(bytes(versioned))
    with pytest.raises(VersionMismatch):
        read_checkpoint(tmp_path / "ver.ckpt")


# -- ablation ------------------------------------------------------------------
def test_table3_grid_structure():
    names = [n for n, _ in GRIDS["table3"]]
    assert names == [
        "2-to-1", "8-to-1", "2-to-1+RCLM", "2-to-1+8-to-1", "2-to-1+8-to-1+RCLM",
        "K=1", "K=2", "K=3", "K=4",
    ]
    flags = dict(GRIDS["table3"])
    assert flags["8-to-1"] == dict(use_local=False, use_global=True, use_rclm=False)


def test_run_ablation_writes_table(tmp_path, data):
    base = replace(TINY, epochs=1)
    rows = run_ablation(base, "table3", data, data, seeds=(0,), out_dir=tmp_path)
    assert len(rows) == 9
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0] == "variant,2-to-1,8-to-1,RCLM,K,acc_seed0,mean_accuracy,std_accuracy"
    assert len(lines) == 10
    by = {r.variant: r for r in rows}
    # K=1 is the same configuration as the full component row at K=1
    assert by["K=1"].accuracies == by["2-to-1+8-to-1+RCLM"].accuracies
    assert [by[f"K={k}"].K for k in (1, 2, 3, 4)] == [1, 2, 3, 4]


def _row(name, accs):
    return AblationRow(name, True, True, True, 3, list(range(len(accs))), accs)


def test_ablation_trend_logic():
    rows = [
        _row("2-to-1", [0.80]),
        _row("8-to-1", [0.70]),
        _row("2-to-1+8-to-1", [0.795]),
        _row("2-to-1+8-to-1+RCLM", [0.81]),
    ]
    out = ablation_trend(rows)
    assert out["ordering_holds"] and not out["failed"]

    rows[3] = _row("2-to-1+8-to-1+RCLM", [0.785])
    out = ablation_trend(rows)
    assert not out["ordering_holds"] and not out["failed"]

    rows[3] = _row("2-to-1+8-to-1+RCLM", [0.77])
    assert ablation_trend(rows)["failed"]
