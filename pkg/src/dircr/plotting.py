"""Report figures: training curves, ablation bars and puzzle sheets.

Everything renders through the Agg canvas on a standalone ``Figure``, so no
global pyplot state or display is involved.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .puzzle_gen import Puzzle


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    return path


def plot_training_curves(history: Sequence, path: str | Path, chance_loss: float = float(np.log(8))) -> Path:
    """Losses on the left, validation accuracy and pseudo-label rates on the right."""
    epochs = [r.epoch for r in history]
    fig = Figure(figsize=(10, 4))
    ax_loss, ax_acc = fig.subplots(1, 2)

    ax_loss.plot(epochs, [r.train_ce_loss for r in history], marker="o", label="cross-entropy")
    ax_loss.plot(epochs, [r.train_rclm_loss for r in history], marker="s", label="contrastive (weighted)")
    ax_loss.axhline(chance_loss, color="grey", ls="--", lw=1, label="ln 8")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_loss.legend(frameon=False)

    ax_acc.plot(epochs, [r.val_accuracy for r in history], marker="o", label="val accuracy")
    ax_acc.plot(epochs, [r.pl_accept_rate for r in history], ls=":", label="pseudo-label accept")
    ax_acc.plot(epochs, [r.pl_correct_rate for r in history], ls="-.", label="pseudo-label correct")
    ax_acc.axhline(0.125, color="grey", ls="--", lw=1, label="chance")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.set_xlabel("epoch")
    ax_acc.legend(frameon=False, loc="lower right")
    return _save(fig, path)


def plot_ablation(rows: Sequence, path: str | Path) -> Path:
    """Mean test accuracy per variant with one-std error bars and per-seed dots."""
    names = [r.variant for r in rows]
    means = np.array([100 * r.mean_accuracy for r in rows])
    stds = np.array([100 * r.std_accuracy for r in rows])
    x = np.arange(len(rows))

    fig = Figure(figsize=(max(6, 1.1 * len(rows)), 4))
    ax = fig.subplots()
    ax.bar(x, means, yerr=stds, capsize=4, color="#8da0cb", edgecolor="black", lw=0.6)
    for i, r in enumerate(rows):
        ax.scatter(np.full(len(r.accuracies), i), 100 * np.asarray(r.accuracies), color="black", s=10, zorder=3)
    ax.axhline(12.5, color="grey", ls="--", lw=1)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("test accuracy (%)")
    ax.set_ylim(0, 100)
    return _save(fig, path)


def plot_puzzle(puzzle: Puzzle, path: str | Path, title: str | None = None) -> Path:
    """3x3 matrix with the missing slot blank, candidates below; answer outlined."""
    fig = Figure(figsize=(6, 9))
    outer = fig.add_gridspec(2, 1, height_ratios=[3, 2.1], hspace=0.15)
    matrix = outer[0].subgridspec(3, 3)
    for i in range(9):
        ax = fig.add_subplot(matrix[i // 3, i % 3])
        img = puzzle.context[i] if i < 8 else np.full_like(puzzle.context[0], 255)
        ax.imshow(img, cmap="gray", vmin=0, vmax=255)
        ax.set_xticks([])
        ax.set_yticks([])
        if i == 8:
            ax.text(0.5, 0.5, "?", ha="center", va="center", fontsize=24, transform=ax.transAxes)
    cands = outer[1].subgridspec(2, 4)
    for j in range(8):
        ax = fig.add_subplot(cands[j // 4, j % 4])
        ax.imshow(puzzle.candidates[j], cmap="gray", vmin=0, vmax=255)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(str(j), fontsize=9)
        if j == puzzle.answer_index:
            for spine in ax.spines.values():
                spine.set_color("red")
                spine.set_linewidth(2.5)
    fig.suptitle(title or "; ".join(f"{r.attribute}: {r.kind}" for r in puzzle.rules), fontsize=10)
    return _save(fig, path)
