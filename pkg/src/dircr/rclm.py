"""Rule-contrastive learning: pseudo-labels, row-feature projection and loss.

Similarity is ``exp(cos(a, b) / tau)``. Only positives act as anchors, and
each anchor's own self-pair is kept in both numerator and denominator.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DegenerateInput


@dataclass(frozen=True)
class ProjectionConfig:
    out_dim: int = 128
    temperature: float = 0.2
    confidence_threshold: float = 0.60
    loss_weight: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 1 / 8 < self.confidence_threshold <= 1:
            raise ValueError("confidence_threshold must be in (1/8, 1]")
        if self.loss_weight < 0:
            raise ValueError("loss_weight must be >= 0")


def pseudo_label(probs, threshold: float = 0.60) -> int | None:
    """Argmax candidate if its probability reaches ``threshold``, else None."""
    probs = torch.as_tensor(probs)
    idx = int(torch.argmax(probs))
    return idx if float(probs[idx]) >= threshold else None


def pseudo_labels(probs: torch.Tensor, threshold: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched form: ``(argmax [B], accepted [B] bool)``."""
    conf, idx = probs.max(dim=-1)
    return idx, conf >= threshold


def l2_normalize(z: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norm = z.norm(dim=-1, keepdim=True)
    if bool((norm < eps).any()):
        raise DegenerateInput("projection output has ~zero norm")
    return z / norm


class ProjectionHead(nn.Module):
    """Two-layer perceptron ``3C -> 3C -> out_dim`` followed by L2 normalisation."""

    def __init__(self, in_dim: int, out_dim: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, in_dim)
        self.fc2 = nn.Linear(in_dim, out_dim)

    def raw(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.raw(x))


@dataclass
class ContrastiveSets:
    positives: torch.Tensor  # [P, D] unit vectors
    negatives: torch.Tensor  # [N, D] unit vectors
    anchor_accepted: bool = True


def build_sets(row_z: torch.Tensor, c_hat: int | None) -> ContrastiveSets:
    """``row_z`` is ``[8, 3, D]``: projected row features for each filled-in candidate.

    Positives are rows 1 and 2 plus row 3 of the pseudo-labelled candidate's
    state; negatives are row 3 of every other candidate's state.
    """
    d = row_z.shape[-1]
    if c_hat is None:
        empty = row_z.new_zeros((0, d))
        return ContrastiveSets(empty, empty, anchor_accepted=False)
    others = [j for j in range(row_z.shape[0]) if j != c_hat]
    return ContrastiveSets(row_z[c_hat], row_z[others, 2], anchor_accepted=True)


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a = a / a.norm(dim=-1, keepdim=True)
    b = b / b.norm(dim=-1, keepdim=True)
    return a @ b.transpose(-1, -2)


def contrastive_loss(positives: torch.Tensor, negatives: torch.Tensor, temperature: float = 0.2) -> torch.Tensor:
    """Sum over positive anchors of ``-log(sum_P sim / sum_{P u N} sim)``.

    Works on a single set (``[P, D]``, ``[N, D]``) or a batch (``[B, P, D]``,
    ``[B, N, D]``, returning ``[B]``).

    Each anchor term is evaluated as ``softplus(lse(neg) - lse(pos))`` on
    logits shifted by the self-similarity ``1/tau``, which keeps every
    intermediate O(1) and float32 roundoff well below the loss scale.
    """
    n_pos = positives.shape[-2]
    if negatives.shape[-2] == 0:
        return positives.sum(dim=(-2, -1)) * 0.0
    everything = torch.cat([positives, negatives], dim=-2)
    logits = (_cosine(positives, everything) - 1.0) / temperature
    gap = torch.logsumexp(logits[..., n_pos:], dim=-1) - torch.logsumexp(logits[..., :n_pos], dim=-1)
    return F.softplus(gap).sum(dim=-1)


def set_loss(sets: ContrastiveSets, temperature: float = 0.2) -> torch.Tensor:
    if not sets.anchor_accepted:
        return torch.zeros(())
    return contrastive_loss(sets.positives, sets.negatives, temperature)


def rclm_step(
    row_feats: torch.Tensor,
    probs: torch.Tensor,
    head: ProjectionHead,
    cfg: ProjectionConfig,
    answers: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict]:
    """Weighted batch RCLM loss.

    ``row_feats`` is ``[B, 8, 3, 3C]`` (row features of every candidate-filled
    state), ``probs`` ``[B, 8]``. Pseudo-labels are taken from ``probs`` without
    gradient. Rejected samples never reach the projection head.
    """
    c_hat, accepted = pseudo_labels(probs.detach(), cfg.confidence_threshold)
    stats = {"accepted": int(accepted.sum()), "total": int(probs.shape[0]), "correct": 0}
    if answers is not None:
        stats["correct"] = int((accepted & (c_hat == answers)).sum())
    if stats["accepted"] == 0 or cfg.loss_weight == 0:
        return torch.zeros(()), stats

    idx = torch.nonzero(accepted).squeeze(1)
    feats, chosen = row_feats[idx], c_hat[idx]
    a, n_cand = feats.shape[0], feats.shape[1]
    ar = torch.arange(a)
    pos_in = feats[ar, chosen]  # [A, 3, 3C]
    neg_mask = torch.ones(a, n_cand, dtype=torch.bool)
    neg_mask[ar, chosen] = False
    neg_in = feats[:, :, 2][neg_mask].view(a, n_cand - 1, -1)  # [A, 7, 3C]
    z = head(torch.cat([pos_in, neg_in], dim=1))
    loss = contrastive_loss(z[:, :3], z[:, 3:], cfg.temperature)
    return cfg.loss_weight * loss.mean(), stats
