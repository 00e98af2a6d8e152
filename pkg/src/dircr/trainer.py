"""Training loop, evaluation, checkpoints and the ablation runner."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, CorruptFile, EmptyDataset, NonFiniteLoss, VersionMismatch
from .model import DIRCR, ModelConfig, classification_loss, to_input
from .puzzle_gen import Puzzle, puzzles_to_arrays
from .rclm import ProjectionConfig, rclm_step

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DIRCRCKPT"
CKPT_VERSION = 1
METRICS_HEADER = (
    "epoch",
    "train_ce_loss",
    "train_rclm_loss",
    "val_accuracy",
    "pl_accept_rate",
    "pl_correct_rate",
    "wall_time_s",
)


@dataclass(frozen=True)
class TrainConfig:
    # desk-scale defaults; see FULL_SCALE for the full-size recipe
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    K: int = 3
    use_local: bool = True
    use_global: bool = True
    use_rclm: bool = True
    rclm: ProjectionConfig = field(default_factory=ProjectionConfig)
    warmup_epochs: int = 3
    rclm_mode: str = "joint"  # or "two_phase": pseudo-labels from a frozen post-warmup copy
    image_size: int = 32
    channels: int = 32
    n_blocks: int = 4
    n_heads: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if not (self.use_local or self.use_global):
            raise ConfigError("at least one of use_local / use_global must be true")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1 or self.K < 1 or self.epochs < 0:
            raise ConfigError("batch_size and K must be >= 1, epochs >= 0")
        if self.rclm_mode not in ("joint", "two_phase"):
            raise ConfigError(f"unknown rclm_mode {self.rclm_mode!r}")
        if isinstance(self.rclm, dict):
            object.__setattr__(self, "rclm", ProjectionConfig(**self.rclm))

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            channels=self.channels,
            n_blocks=self.n_blocks,
            K=self.K,
            n_heads=self.n_heads,
            dropout=self.dropout,
            use_local=self.use_local,
            use_global=self.use_global,
            proj_dim=self.rclm.out_dim,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "rclm" in d:
            rclm = dict(d["rclm"])
            bad = set(rclm) - {f.name for f in fields(ProjectionConfig)}
            if bad:
                raise ConfigError(f"unknown rclm keys: {sorted(bad)}")
            d["rclm"] = ProjectionConfig(**rclm)
        return cls(**d)


FULL_SCALE = TrainConfig(batch_size=128, image_size=80, channels=64)


@dataclass
class MetricsRecord:
    epoch: int
    train_ce_loss: float
    train_rclm_loss: float
    val_accuracy: float
    pl_accept_rate: float
    pl_correct_rate: float
    wall_time_s: float

    def row(self) -> list:
        return [getattr(self, k) for k in METRICS_HEADER]


class Dataset:
    """In-memory puzzles as uint8 panels ``[N, 16, H, W]`` plus answers ``[N]``."""

    def __init__(self, panels: np.ndarray, answers: np.ndarray):
        self.panels = np.ascontiguousarray(panels, dtype=np.uint8)
        self.answers = np.asarray(answers, dtype=np.int64)

    @classmethod
    def from_puzzles(cls, puzzles: Sequence[Puzzle]) -> "Dataset":
        if not puzzles:
            raise EmptyDataset("no puzzles")
        return cls(*puzzles_to_arrays(puzzles))

    def __len__(self):
        return len(self.answers)

    def batch(self, idx) -> tuple[torch.Tensor, torch.Tensor]:
        return to_input(self.panels[idx]), torch.as_tensor(self.answers[idx])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle order for one epoch; depends only on (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


class Trainer:
    def __init__(self, cfg: TrainConfig, train: Dataset | None = None, val: Dataset | None = None):
        self.cfg = cfg
        self.train_data = train
        self.val_data = val
        # the trainer owns its torch RNG stream (init + dropout) so concurrent
        # trainers and checkpoint resumes never disturb each other
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.model = DIRCR(cfg.model)
            self.rng_state = torch.get_rng_state()
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
        )
        # materialise grads so untouched parameters still receive decoupled decay
        for p in self.model.parameters():
            p.grad = torch.zeros_like(p)
        self.epoch = 0
        self.history: list[MetricsRecord] = []
        self.teacher: DIRCR | None = None

    # -- training -----------------------------------------------------------
    def rclm_active(self, epoch: int) -> bool:
        return self.cfg.use_rclm and epoch >= self.cfg.warmup_epochs

    def train_step(self, panels: torch.Tensor, answers: torch.Tensor, epoch: int | None = None) -> dict:
        with torch.random.fork_rng(devices=[]):
            torch.set_rng_state(self.rng_state)
            out = self._step(panels, answers, self.epoch if epoch is None else epoch)
            self.rng_state = torch.get_rng_state()
        return out

    def _step(self, panels: torch.Tensor, answers: torch.Tensor, epoch: int) -> dict:
        self.model.train()
        out = self.model(panels)
        ce = classification_loss(out["logits"], answers)
        rclm = torch.zeros(())
        stats = {"accepted": 0, "total": len(answers), "correct": 0}
        if self.rclm_active(epoch):
            probs = out["probs"]
            if self.cfg.rclm_mode == "two_phase" and self.teacher is not None:
                with torch.no_grad():
                    probs = self.teacher(panels)["probs"]
            rclm, stats = rclm_step(out["row_feats"], probs, self.model.projection, self.cfg.rclm, answers)
        total = ce + rclm
        if not torch.isfinite(total):
            raise NonFiniteLoss(
                f"non-finite loss at epoch {epoch}: ce={ce.item()} rclm={rclm.item()}"
            )
        self.optimizer.zero_grad(set_to_none=False)
        total.backward()
        self.optimizer.step()
        return {"ce": ce.item(), "rclm": rclm.item(), **stats}

    def train_epoch(self) -> MetricsRecord:
        if self.train_data is None or len(self.train_data) == 0:
            raise EmptyDataset("no training data")
        epoch = self.epoch
        if self.cfg.rclm_mode == "two_phase" and self.rclm_active(epoch) and self.teacher is None:
            self.teacher = copy.deepcopy(self.model).eval()
        t0 = time.perf_counter()
        order = epoch_order(self.cfg.seed, epoch, len(self.train_data))
        bs = self.cfg.batch_size
        ce_sum = rclm_sum = 0.0
        n_batches = accepted = correct = total = 0
        for start in range(0, len(order), bs):
            x, y = self.train_data.batch(order[start : start + bs])
            s = self.train_step(x, y, epoch)
            ce_sum += s["ce"]
            rclm_sum += s["rclm"]
            accepted += s["accepted"]
            correct += s["correct"]
            total += s["total"]
            n_batches += 1
        val_acc = self.evaluate(self.val_data) if self.val_data is not None else float("nan")
        rec = MetricsRecord(
            epoch=epoch,
            train_ce_loss=ce_sum / n_batches,
            train_rclm_loss=rclm_sum / n_batches,
            val_accuracy=val_acc,
            pl_accept_rate=accepted / total if self.rclm_active(epoch) else 0.0,
            pl_correct_rate=correct / accepted if accepted else 0.0,
            wall_time_s=time.perf_counter() - t0,
        )
        self.history.append(rec)
        self.epoch += 1
        log.info(
            "epoch %d ce=%.4f rclm=%.4f val=%.4f accept=%.3f (%.1fs)",
            rec.epoch, rec.train_ce_loss, rec.train_rclm_loss, rec.val_accuracy,
            rec.pl_accept_rate, rec.wall_time_s,
        )
        return rec

    def fit(
        self,
        epochs: int | None = None,
        out_dir: str | Path | None = None,
        checkpoint_every: int = 1,
    ) -> list[MetricsRecord]:
        """Train until ``epochs`` total epochs have run (resumes from ``self.epoch``)."""
        epochs = self.cfg.epochs if epochs is None else epochs
        out_dir = Path(out_dir) if out_dir is not None else None
        while self.epoch < epochs:
            self.train_epoch()
            if out_dir is not None:
                write_metrics_csv(self.history, out_dir / "metrics.csv")
                if checkpoint_every and (self.epoch % checkpoint_every == 0 or self.epoch == epochs):
                    save_checkpoint(self, out_dir / "last.ckpt")
        return self.history

    # -- evaluation ---------------------------------------------------------
    @torch.no_grad()
    def predict(self, data: Dataset, batch_size: int | None = None) -> np.ndarray:
        self.model.eval()
        bs = batch_size or self.cfg.batch_size
        preds = []
        for start in range(0, len(data), bs):
            x, _ = data.batch(np.arange(start, min(start + bs, len(data))))
            preds.append(self.model(x)["logits"].argmax(-1).numpy())
        return np.concatenate(preds)

    def evaluate(self, data: Dataset | None) -> float:
        return evaluate(self.model, data, self.cfg.batch_size)


@torch.no_grad()
def evaluate(model, data: Dataset | None, batch_size: int = 64) -> float:
    """Accuracy of ``argmax(logits) == answer`` in inference mode."""
    if data is None or len(data) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    hits = 0
    for start in range(0, len(data), batch_size):
        x, y = data.batch(np.arange(start, min(start + batch_size, len(data))))
        hits += int((model(x)["logits"].argmax(-1) == y).sum())
    model.train(was_training)
    return hits / len(data)


# -- metrics ---------------------------------------------------------------
def write_metrics_csv(history: Sequence[MetricsRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        for rec in history:
            w.writerow([repr(v) if isinstance(v, float) else v for v in rec.row()])


def read_metrics_csv(path: str | Path) -> list[MetricsRecord]:
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        if tuple(r.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {r.fieldnames}")
        return [
            MetricsRecord(**{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()})
            for row in r
        ]


# -- checkpoints -------------------------------------------------------------
# layout: magic | u16 version | u64 payload length | sha256(payload) | payload
_HEADER = struct.Struct("<HQ")


def save_checkpoint(trainer: Trainer, path: str | Path) -> Path:
    state = {
        "model": trainer.model.state_dict(),
        "optimizer": trainer.optimizer.state_dict(),
        "config": trainer.cfg.to_dict(),
        "epoch": trainer.epoch,
        "history": [asdict(r) for r in trainer.history],
        "torch_rng": trainer.rng_state,
        "teacher": trainer.teacher.state_dict() if trainer.teacher is not None else None,
    }
    buf = io.BytesIO()
    torch.save(state, buf)
    payload = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(_HEADER.pack(CKPT_VERSION, len(payload)))
        f.write(hashlib.sha256(payload).digest())
        f.write(payload)
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> dict:
    data = Path(path).read_bytes()
    head = len(CKPT_MAGIC) + _HEADER.size + 32
    if len(data) < head or data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint (bad magic or truncated header)")
    version, n = _HEADER.unpack_from(data, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    digest = data[len(CKPT_MAGIC) + _HEADER.size : head]
    payload = data[head:]
    if len(payload) != n:
        raise CorruptFile(f"{path}: payload is {len(payload)} bytes, header says {n}")
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch")
    return torch.load(io.BytesIO(payload), weights_only=False)


def load_checkpoint(path: str | Path, train: Dataset | None = None, val: Dataset | None = None) -> Trainer:
    """Rebuild a trainer exactly as it was when saved (model, optimizer, RNG, history)."""
    state = read_checkpoint(path)
    trainer = Trainer(TrainConfig.from_dict(state["config"]), train, val)
    trainer.model.load_state_dict(state["model"])
    trainer.optimizer.load_state_dict(state["optimizer"])
    trainer.epoch = int(state["epoch"])
    trainer.history = [MetricsRecord(**r) for r in state["history"]]
    if state.get("teacher") is not None:
        trainer.teacher = DIRCR(trainer.cfg.model)
        trainer.teacher.load_state_dict(state["teacher"])
        trainer.teacher.eval()
    trainer.rng_state = state["torch_rng"]
    return trainer


# -- ablation ----------------------------------------------------------------
TABLE3_COMPONENT_ROWS = (
    ("2-to-1", dict(use_local=True, use_global=False, use_rclm=False)),
    ("8-to-1", dict(use_local=False, use_global=True, use_rclm=False)),
    ("2-to-1+RCLM", dict(use_local=True, use_global=False, use_rclm=True)),
    ("2-to-1+8-to-1", dict(use_local=True, use_global=True, use_rclm=False)),
    ("2-to-1+8-to-1+RCLM", dict(use_local=True, use_global=True, use_rclm=True)),
)
TABLE3_K_ROWS = tuple((f"K={k}", dict(use_local=True, use_global=True, use_rclm=True, K=k)) for k in (1, 2, 3, 4))
GRIDS = {
    "table3": TABLE3_COMPONENT_ROWS + TABLE3_K_ROWS,
    "components": TABLE3_COMPONENT_ROWS,
    "trend": (TABLE3_COMPONENT_ROWS[0], TABLE3_COMPONENT_ROWS[1], TABLE3_COMPONENT_ROWS[3], TABLE3_COMPONENT_ROWS[4]),
}


@dataclass
class AblationRow:
    variant: str
    use_local: bool
    use_global: bool
    use_rclm: bool
    K: int
    seeds: list[int]
    accuracies: list[float]
    histories: list[list[MetricsRecord]] = field(default_factory=list, repr=False)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std_accuracy(self) -> float:
        return float(np.std(self.accuracies))


def run_ablation(
    base_cfg: TrainConfig,
    grid: str | Sequence[tuple[str, dict]],
    train: Dataset,
    test: Dataset,
    seeds: Sequence[int] = (0, 1, 2),
    out_dir: str | Path | None = None,
) -> list[AblationRow]:
    """Train every variant on identical data and seeds; identical configs are trained once."""
    variants = GRIDS[grid] if isinstance(grid, str) else grid
    cache: dict[str, tuple[float, list[MetricsRecord]]] = {}
    rows = []
    for name, overrides in variants:
        cfg = replace(base_cfg, **overrides)
        accs, hists = [], []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            key = json.dumps(run_cfg.to_dict(), sort_keys=True)
            if key not in cache:
                log.info("ablation: %s seed=%d", name, seed)
                trainer = Trainer(run_cfg, train, None)
                trainer.fit()
                cache[key] = (trainer.evaluate(test), list(trainer.history))
            acc, hist = cache[key]
            accs.append(acc)
            hists.append(hist)
        rows.append(
            AblationRow(name, cfg.use_local, cfg.use_global, cfg.use_rclm, cfg.K, list(seeds), accs, hists)
        )
        if out_dir is not None:
            write_ablation_csv(rows, Path(out_dir) / "ablation.csv")
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_seeds = max(len(r.seeds) for r in rows)
    header = ["variant", "2-to-1", "8-to-1", "RCLM", "K"]
    header += [f"acc_seed{i}" for i in range(n_seeds)] + ["mean_accuracy", "std_accuracy"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow(
                [r.variant, int(r.use_local), int(r.use_global), int(r.use_rclm), r.K]
                + [f"{a:.4f}" for a in r.accuracies]
                + [f"{r.mean_accuracy:.4f}", f"{r.std_accuracy:.4f}"]
            )


def ablation_trend(rows: Sequence[AblationRow], slack_pts: float = 1.0, fail_pts: float = 2.0) -> dict:
    """Check the ordering full >= local+global >= max(local, global) - slack.

    ``failed`` is set only when the full model trails local-only by more than
    ``fail_pts`` percentage points.
    """
    by = {r.variant: 100.0 * r.mean_accuracy for r in rows}
    full, both = by["2-to-1+8-to-1+RCLM"], by["2-to-1+8-to-1"]
    local, glob = by["2-to-1"], by["8-to-1"]
    best_single = max(local, glob)
    checks = {
        "full_ge_both": full >= both - slack_pts,
        "both_ge_single": both >= best_single - slack_pts,
        "full_ge_local": full >= local,
    }
    return {
        "means_pct": by,
        "checks": checks,
        "ordering_holds": all(checks.values()),
        "failed": full < local - fail_pts,
    }
