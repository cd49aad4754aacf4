"""Decoder with configurable skip connections, and the training losses."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .encoder import ShapeError, init_conv


class LabelError(ValueError):
    pass


class Decoder(nn.Module):
    """Three (x2 trilinear upsample -> concat skip -> 3^3 conv -> ReLU) stages and a 1^3 head.

    Skips are consumed deepest first; only the first ``num_skips`` of
    (S3, S2, S1) are concatenated.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.num_skips = config.num_skips
        self.ups = nn.ModuleList()
        prev = config.stage_channels(4)
        for i, s in enumerate((3, 2, 1)):
            n = config.stage_channels(s)
            in_ch = prev + (n if i < self.num_skips else 0)
            conv = nn.Conv3d(in_ch, n, 3, padding=1)
            init_conv(conv)
            self.ups.append(conv)
            prev = n
        self.head = nn.Conv3d(prev, config.num_classes, 1)
        init_conv(self.head)

    def forward(self, z4: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        """``skips`` is (S3, S2, S1); entries past ``num_skips`` are ignored and may be None."""
        x = z4
        for i, conv in enumerate(self.ups):
            x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            if i < self.num_skips:
                skip = skips[i]
                if skip.shape[0] != x.shape[0] or skip.shape[2:] != x.shape[2:]:
                    raise ShapeError(
                        f"skip {i} has shape {tuple(skip.shape)}, decoder is at {tuple(x.shape)}"
                    )
                x = torch.cat([x, skip], dim=1)
            x = F.relu(conv(x))
        return self.head(x)


def seg_loss(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Voxel-averaged softmax cross-entropy."""
    k = logits.shape[1]
    if mask.numel() and (int(mask.max()) >= k or int(mask.min()) < 0):
        raise LabelError(f"mask labels must lie in [0, {k - 1}]")
    return F.cross_entropy(logits, mask.long())


def combine_losses(l_seg, l_sd, lam: float):
    """L = L_seg + lam * L_sd; the distillation term is dropped when absent or lam == 0."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if l_sd is None or lam == 0:
        return l_seg
    return l_seg + lam * l_sd


def total_loss(logits: torch.Tensor, mask: torch.Tensor,
               l_sd: torch.Tensor | None, lam: float) -> torch.Tensor:
    return combine_losses(seg_loss(logits, mask), l_sd, lam)
