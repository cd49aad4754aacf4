"""3D CNN stem producing the four-stage local feature pyramid."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .config import ModelConfig


class ShapeError(ValueError):
    pass


def init_conv(conv: nn.Conv3d) -> None:
    fan_in = conv.in_channels * math.prod(conv.kernel_size)
    nn.init.normal_(conv.weight, 0.0, math.sqrt(2.0 / fan_in))
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


class ConvBlock(nn.Sequential):
    """3x3x3 same-padded conv -> instance norm -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        conv = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        init_conv(conv)
        super().__init__(conv, nn.InstanceNorm3d(out_ch, affine=True), nn.ReLU())


class Encoder3D(nn.Module):
    """Stage s has N_s = base * 2^(s-1) channels at 1/2^(s-1) resolution.

    Each stage is two ConvBlocks; stages 2..4 are entered through a stride-2
    3x3x3 conv that doubles the channel count.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.down = nn.ModuleList()
        self.stages = nn.ModuleList()
        prev = config.in_channels
        for s in range(1, config.stages + 1):
            n = config.stage_channels(s)
            if s == 1:
                self.down.append(nn.Identity())
            else:
                conv = nn.Conv3d(prev, n, 3, stride=2, padding=1)
                init_conv(conv)
                self.down.append(conv)
                prev = n
            self.stages.append(nn.Sequential(ConvBlock(prev, n), ConvBlock(n, n)))
            prev = n

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        factor = 2 ** (self.config.stages - 1)
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected input (B, {self.config.in_channels}, H, W, D), got {tuple(x.shape)}"
            )
        if any(s % factor for s in x.shape[2:]):
            raise ShapeError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {factor}")
        feats = []
        for down, stage in zip(self.down, self.stages):
            x = stage(down(x))
            feats.append(x)
        return feats
