"""Full DIRCR network and the candidate scoring head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .dirm import DirmConfig, DirmStack
from .encoder import Encoder, EncoderConfig
from .errors import IndexOutOfRange, ShapeMismatch
from .rclm import ProjectionHead

N_CANDIDATES = 8


@dataclass
class CandidateScores:
    logits: torch.Tensor  # [..., 8]
    probs: torch.Tensor  # [..., 8]


class ScoringHead(nn.Module):
    """Shared MLP ``C -> C -> 1`` applied to every candidate's pooled vector."""

    def __init__(self, channels: int, dropout: float = 0.1):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(channels, channels),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(channels, 1),
        )

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.net(pooled).squeeze(-1)


def score_candidates(pooled: torch.Tensor, head: ScoringHead) -> CandidateScores:
    """``pooled`` is ``[B, 8, C]``."""
    logits = head(pooled)
    return CandidateScores(logits, torch.softmax(logits, dim=-1))


def classification_loss(logits: torch.Tensor, answer_index) -> torch.Tensor:
    """Mean cross-entropy over the 8 candidates."""
    answer = torch.as_tensor(answer_index, dtype=torch.long)
    if bool(((answer < 0) | (answer >= logits.shape[-1])).any()):
        raise IndexOutOfRange(f"answer index out of 0..{logits.shape[-1] - 1}")
    if logits.dim() == 1:
        return F.cross_entropy(logits[None], answer.view(1))
    return F.cross_entropy(logits, answer)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 80
    channels: int = 64
    n_blocks: int = 4
    K: int = 3
    n_heads: int = 4
    dropout: float = 0.1
    use_local: bool = True
    use_global: bool = True
    proj_dim: int = 128

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(in_size=self.image_size, channels=self.channels, n_blocks=self.n_blocks)

    @property
    def dirm(self) -> DirmConfig:
        return DirmConfig(
            channels=self.channels,
            n_heads=self.n_heads,
            K=self.K,
            dropout=self.dropout,
            use_local=self.use_local,
            use_global=self.use_global,
        )


class DIRCR(nn.Module):
    """Encoder -> K stacked reasoning blocks -> per-candidate logits.

    Every candidate is placed in the missing slot, giving 8 reasoning states per
    puzzle that share all parameters.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder)
        self.reasoner = DirmStack(cfg.dirm)
        self.head = ScoringHead(cfg.channels, cfg.dropout)
        self.projection = ProjectionHead(3 * cfg.channels, cfg.proj_dim)

    def build_states(self, feats: torch.Tensor) -> torch.Tensor:
        """``[B, 16, C, h, w]`` panel features -> ``[B*8, 9, C, h, w]`` states."""
        b = feats.shape[0]
        ctx = feats[:, None, :8].expand(-1, N_CANDIDATES, -1, -1, -1, -1)
        cand = feats[:, 8:, None]
        return torch.cat([ctx, cand], dim=2).reshape(b * N_CANDIDATES, 9, *feats.shape[2:])

    def forward(self, panels: torch.Tensor) -> dict:
        """``panels`` is ``[B, 16, H, W]`` in [0, 1]: 8 context panels, then 8 candidates.

        Returns logits ``[B, 8]``, probs, and row features ``[B, 8, 3, 3C]``.
        """
        if panels.dim() != 4 or panels.shape[1] != 16:
            raise ShapeMismatch(f"expected [B, 16, H, W], got {tuple(panels.shape)}")
        b, _, hgt, wid = panels.shape
        feats = self.encoder(panels.reshape(b * 16, 1, hgt, wid))
        feats = feats.view(b, 16, *feats.shape[1:])
        _, rows, pooled = self.reasoner(self.build_states(feats))
        scores = score_candidates(pooled.view(b, N_CANDIDATES, -1), self.head)
        return {
            "logits": scores.logits,
            "probs": scores.probs,
            "row_feats": rows.view(b, N_CANDIDATES, 3, -1),
        }


def to_input(panels_u8) -> torch.Tensor:
    """uint8 panels -> float32 tensor in [0, 1]."""
    x = torch.as_tensor(panels_u8)
    return x.to(torch.float32) / 255.0


CHANCE_LOSS = math.log(N_CANDIDATES)
