"""Residual convolutional panel encoder ("ResNet-4b")."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ShapeMismatch


@dataclass(frozen=True)
class EncoderConfig:
    in_size: int = 80
    channels: int = 64
    n_blocks: int = 4
    downsample_per_block: bool = True

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.downsample_per_block and self.in_size % (2**self.n_blocks):
            raise ValueError(f"in_size {self.in_size} not divisible by 2**{self.n_blocks}")

    @property
    def out_size(self) -> int:
        return self.in_size // 2**self.n_blocks if self.downsample_per_block else self.in_size

    @property
    def widths(self) -> list[int]:
        # e.g. 32 -> 64 -> 64 -> 64 for channels=64
        return [max(self.channels // 2, 1)] + [self.channels] * (self.n_blocks - 1)


class ConvNormAct(nn.Sequential):
    """Conv2d -> BatchNorm2d -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=kernel_size // 2, bias=False),
            # torch momentum 0.1 == running stats kept at 0.9 * old + 0.1 * batch
            nn.BatchNorm2d(out_ch, momentum=0.1),
            nn.ReLU(inplace=False),
        )


class ResidualBlock(nn.Module):
    """Conv3x3-BN-ReLU-Conv3x3-BN plus skip, then ReLU.

    The skip is the identity when shapes already match, otherwise a strided
    1x1 convolution with batch norm.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 2):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride == 1 and in_ch == out_ch:
            self.skip = nn.Identity()
        else:
            self.skip = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        h = torch.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return torch.relu(h + self.skip(x))


class Encoder(nn.Module):
    """Maps ``[N, 1, H, W]`` panels in [0, 1] to ``[N, C, H / 2**n, W / 2**n]`` features."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        stride = 2 if cfg.downsample_per_block else 1
        blocks, in_ch = [], 1
        for w in cfg.widths:
            blocks.append(ResidualBlock(in_ch, w, stride))
            in_ch = w
        self.blocks = nn.Sequential(*blocks)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 1:
            raise ShapeMismatch(f"expected [N, 1, H, W], got {tuple(images.shape)}")
        if images.shape[-1] != self.cfg.in_size or images.shape[-2] != self.cfg.in_size:
            raise ShapeMismatch(f"expected {self.cfg.in_size}px panels, got {tuple(images.shape[-2:])}")
        return self.blocks(images)
