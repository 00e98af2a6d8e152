"""Dual-inference reasoning blocks.

A reasoning state is a ``[B, 9, C, h, w]`` tensor holding the eight context
panels followed by one candidate in the missing slot. Rows are panels
(0, 1, 2), (3, 4, 5) and (6, 7, 8).

Each block runs two predictors over the state:

* a row-wise predictor shared by all rows (first two panels -> third),
* a global predictor over all eight context panels (-> candidate slot),

and turns their prediction errors into tokens that are fused with attention
and a GELU gate. The fused signal is folded back onto every panel of its row
so blocks can be stacked.

The local branch never mixes rows; cross-row information only enters through
the global branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import ConvNormAct
from .errors import ShapeMismatch


@dataclass(frozen=True)
class DirmConfig:
    channels: int = 64
    n_heads: int = 4
    attn_dim: int | None = None
    K: int = 3
    dropout: float = 0.1
    use_local: bool = True
    use_global: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not (self.use_local or self.use_global):
            raise ValueError("at least one of use_local / use_global must be enabled")
        if self.dim % self.n_heads:
            raise ValueError(f"attn_dim {self.dim} not divisible by n_heads {self.n_heads}")

    @property
    def dim(self) -> int:
        return self.attn_dim or self.channels


class LocalPredictor(nn.Module):
    """Predicts a row's third panel from its first two; shared by all rows."""

    def __init__(self, channels: int):
        super().__init__()
        self.net = nn.Sequential(ConvNormAct(2 * channels, channels), ConvNormAct(channels, channels))

    def forward(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        if f1.shape != f2.shape:
            raise ShapeMismatch(f"{tuple(f1.shape)} vs {tuple(f2.shape)}")
        lead = f1.shape[:-3]
        x = torch.cat([f1, f2], dim=-3).reshape(-1, 2 * f1.shape[-3], *f1.shape[-2:])
        return self.net(x).reshape(*lead, *f1.shape[-3:])


class GlobalPredictor(nn.Module):
    """Predicts the missing panel from the eight context panels (positional concat)."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.net = nn.Sequential(ConvNormAct(8 * channels, 2 * channels), ConvNormAct(2 * channels, channels))

    def forward(self, ctx: torch.Tensor) -> torch.Tensor:
        if ctx.shape[-4] != 8 or ctx.shape[-3] != self.channels:
            raise ShapeMismatch(f"expected [..., 8, {self.channels}, h, w], got {tuple(ctx.shape)}")
        lead = ctx.shape[:-4]
        x = ctx.reshape(-1, 8 * self.channels, *ctx.shape[-2:])
        return self.net(x).reshape(*lead, self.channels, *ctx.shape[-2:])


class AttentionLayer(nn.Module):
    """Multi-head attention from ``query`` tokens onto ``context`` tokens,
    with a residual connection and post-LayerNorm."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)

    def attention_weights(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        q, k = self._split(self.q(query)), self._split(self.k(context))
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if query.shape[-1] != context.shape[-1] or query.shape[0] != context.shape[0]:
            raise ShapeMismatch(f"{tuple(query.shape)} vs {tuple(context.shape)}")
        w = self.attention_weights(query, context)
        v = self._split(self.v(context))
        h = (w @ v).transpose(1, 2).reshape(query.shape)
        return self.norm(query + self.out(h))


class GatedFusion(nn.Module):
    """Cross/self-attention fusion of row-wise and global residual tokens,
    followed by channel gating."""

    def __init__(self, channels: int, dim: int, n_heads: int, dropout: float = 0.1):
        super().__init__()
        self.embed = nn.Linear(2 * channels, dim)
        self.cross = AttentionLayer(dim, n_heads)
        self.self_attn = AttentionLayer(dim, n_heads)
        self.dropout = nn.Dropout(dropout)
        self.gate_proj = nn.Linear(dim, dim)

    def fuse(self, local_tokens: torch.Tensor | None, global_tokens: torch.Tensor | None) -> torch.Tensor:
        """``local_tokens`` [B, 3, n, d], ``global_tokens`` [B, n, d] -> fused [B, 3, n, d]."""
        if local_tokens is not None and global_tokens is not None:
            b, r, n, d = local_tokens.shape
            if global_tokens.shape != (b, n, d):
                raise ShapeMismatch(f"{tuple(local_tokens.shape)} vs {tuple(global_tokens.shape)}")
            flat = local_tokens.reshape(b, r * n, d)
            to_global = self.cross(flat, global_tokens).view(b, r, n, d)
            to_local = self.cross(global_tokens, flat)
            mixed = to_global + to_local[:, None]
        elif local_tokens is not None:
            mixed = local_tokens
        else:
            mixed = global_tokens[:, None].expand(-1, 3, -1, -1)
        b, r, n, d = mixed.shape
        flat = mixed.reshape(b * r, n, d)
        return self.self_attn(flat, flat).view(b, r, n, d)

    def gate_vector(self, fused: torch.Tensor) -> torch.Tensor:
        return self.gate_proj(fused.mean(dim=-2))

    def gate(self, fused: torch.Tensor) -> torch.Tensor:
        return F.gelu(self.gate_vector(fused)).unsqueeze(-2) * fused

    def forward(self, local_tokens, global_tokens):
        return self.gate(self.dropout(self.fuse(local_tokens, global_tokens)))


def to_tokens(maps: torch.Tensor) -> torch.Tensor:
    """``[..., C, h, w]`` -> ``[..., h*w, C]``."""
    return maps.flatten(-2).transpose(-1, -2)


def from_tokens(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return tokens.transpose(-1, -2).reshape(*tokens.shape[:-2], tokens.shape[-1], h, w)


class DIRM(nn.Module):
    def __init__(self, cfg: DirmConfig):
        super().__init__()
        self.cfg = cfg
        c, d = cfg.channels, cfg.dim
        self.local = LocalPredictor(c) if cfg.use_local else None
        self.glob = GlobalPredictor(c) if cfg.use_global else None
        self.fusion = GatedFusion(c, d, cfg.n_heads, cfg.dropout)
        self.project = ConvNormAct(c + d, c, kernel_size=1)

    def _check(self, state):
        if state.dim() != 5 or state.shape[1] != 9 or state.shape[2] != self.cfg.channels:
            raise ShapeMismatch(f"expected [B, 9, {self.cfg.channels}, h, w], got {tuple(state.shape)}")

    def local_residual(self, state: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Row-wise errors ``E`` [B, 3, C, h, w] and ``O_L`` [B, 3, 2C, h, w]."""
        rows = state.view(state.shape[0], 3, 3, *state.shape[2:])
        target = rows[:, :, 2]
        err = self.local(rows[:, :, 0], rows[:, :, 1]) - target
        return err, torch.cat([target, err], dim=-3)

    def global_residual(self, state: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Global error ``E_G`` [B, C, h, w] and ``O_G`` [B, 2C, h, w]."""
        target = state[:, 8]
        err = self.glob(state[:, :8]) - target
        return err, torch.cat([target, err], dim=-3)

    def forward(self, state: torch.Tensor) -> torch.Tensor:
        self._check(state)
        b, _, c, h, w = state.shape
        local_tokens = global_tokens = None
        if self.local is not None:
            local_tokens = self.fusion.embed(to_tokens(self.local_residual(state)[1]))
        if self.glob is not None:
            global_tokens = self.fusion.embed(to_tokens(self.global_residual(state)[1]))
        gated = self.fusion(local_tokens, global_tokens)  # [B, 3, hw, d]
        folded = from_tokens(gated, h, w)  # [B, 3, d, h, w]
        folded = folded[:, :, None].expand(-1, -1, 3, -1, -1, -1).reshape(b, 9, -1, h, w)
        out = self.project(torch.cat([state, folded], dim=2).reshape(b * 9, -1, h, w))
        return out.view(b, 9, c, h, w)


def row_features(state: torch.Tensor) -> torch.Tensor:
    """Spatial-mean each panel and concatenate along its row: ``[B, 3, 3C]``."""
    pooled = state.mean(dim=(-2, -1))  # [B, 9, C]
    return pooled.view(state.shape[0], 3, 3 * state.shape[2])


class DirmStack(nn.Module):
    def __init__(self, cfg: DirmConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(DIRM(cfg) for _ in range(cfg.K))

    def forward(self, state: torch.Tensor):
        """Returns ``(final_state, row_feats [B, 3, 3C], pooled [B, C])``."""
        for block in self.blocks:
            state = block(state)
        return state, row_features(state), state.mean(dim=(1, 3, 4))
