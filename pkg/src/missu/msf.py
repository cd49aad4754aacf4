"""Multi-scale fusion (MSF) refinement of stages 1-3 and self-distillation.

Each MSF block adds four parallel atrous branches to its input. With dilation
rates below, the branch receptive fields are 3, 7, 9 and 19:

    branch 1: 3^3 r1
    branch 2: 3^3 r3 -> 1^3
    branch 3: 3^3 r3 -> 1^3 -> 3^3 r1
    branch 4: 3^3 r3 -> 1^3 -> 3^3 r1 -> 3^3 r5

A bottom-up pyramid then mixes each refined stage with the previous pyramid
level (B1 = Ā1, B_s = W_A * Ā_s + W_B * B_{s-1}).
"""

from __future__ import annotations

import copy

import torch
import torch.nn as nn

from .config import ModelConfig
from .encoder import ShapeError, init_conv

# (kernel, dilation) per conv, per branch
BRANCH_LAYOUT = (
    ((3, 1),),
    ((3, 3), (1, 1)),
    ((3, 3), (1, 1), (3, 1)),
    ((3, 3), (1, 1), (3, 1), (3, 5)),
)
BRANCH_RECEPTIVE_FIELDS = (3, 7, 9, 19)
MSF_STAGES = (1, 2, 3)
NORM_EPS = 1e-12


class UnsupportedStageError(ValueError):
    pass


def analytic_receptive_field(layout) -> int:
    """Receptive field of a stride-1 conv chain: 1 + sum (k - 1) * dilation."""
    return 1 + sum((k - 1) * r for k, r in layout)


def make_branch(channels: int, layout) -> nn.Sequential:
    layers = []
    for k, r in layout:
        conv = nn.Conv3d(channels, channels, k, padding=r * (k // 2), dilation=r)
        init_conv(conv)
        layers += [conv, nn.ReLU()]
    return nn.Sequential(*layers)


class MSFBlock(nn.Module):
    """Ā = A + sum of the four branch outputs; shape preserving."""

    def __init__(self, channels: int, stage: int):
        super().__init__()
        if stage not in MSF_STAGES:
            raise UnsupportedStageError(f"MSF applies to stages {MSF_STAGES}, not stage {stage}")
        self.stage = stage
        self.branches = nn.ModuleList(make_branch(channels, lay) for lay in BRANCH_LAYOUT)

    def forward(self, a: torch.Tensor) -> torch.Tensor:
        out = a
        for branch in self.branches:
            out = out + branch(a)
        return out


class FusionPyramid(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.lateral = nn.ModuleDict()
        self.bottom_up = nn.ModuleDict()
        for s in MSF_STAGES[1:]:
            n, n_prev = config.stage_channels(s), config.stage_channels(s - 1)
            wa = nn.Conv3d(n, n, 1)
            wb = nn.Conv3d(n_prev, n, 3, stride=2, padding=1)
            init_conv(wa)
            init_conv(wb)
            self.lateral[str(s)] = wa
            self.bottom_up[str(s)] = wb

    def forward(self, refined: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(refined) != len(MSF_STAGES):
            raise ShapeError(f"pyramid needs {len(MSF_STAGES)} stages, got {len(refined)}")
        outs = [refined[0]]
        for s, a_bar in zip(MSF_STAGES[1:], refined[1:]):
            lat = self.lateral[str(s)](a_bar)
            up = self.bottom_up[str(s)](outs[-1])
            if lat.shape != up.shape:
                raise ShapeError(f"stage {s}: lateral {tuple(lat.shape)} vs bottom-up {tuple(up.shape)}")
            outs.append(lat + up)
        return outs


class MSF(nn.Module):
    """MSF blocks on stages 1-3 followed by the fusion pyramid."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(MSFBlock(config.stage_channels(s), s) for s in MSF_STAGES)
        self.pyramid = FusionPyramid(config)

    def forward(self, feats: list[torch.Tensor]) -> list[torch.Tensor]:
        refined = [blk(a) for blk, a in zip(self.blocks, feats[: len(MSF_STAGES)])]
        return self.pyramid(refined)


def attention_map(f: torch.Tensor) -> torch.Tensor:
    """Channel-summed absolute activation, flattened: (B, N, X, Y, Z) -> (B, XYZ)."""
    return f.abs().sum(dim=1).flatten(1)


def normalized_map(q: torch.Tensor) -> torch.Tensor:
    return q / (torch.linalg.vector_norm(q, dim=-1, keepdim=True) + NORM_EPS)


def distill_from_maps(maps_a: list[torch.Tensor], maps_b: list[torch.Tensor]) -> torch.Tensor:
    """Sum over stages of the L2 distance of L2-normalized maps, averaged over the batch."""
    total = 0.0
    for qa, qb in zip(maps_a, maps_b, strict=True):
        diff = normalized_map(qa) - normalized_map(qb)
        # sqrt written out so that identical maps give a zero (not NaN) gradient
        sq = (diff * diff).sum(dim=-1)
        safe = torch.where(sq > 0, sq, torch.ones_like(sq))
        total = total + torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq))
    return total.mean()


def self_distill_loss(feats_a: list[torch.Tensor], feats_b: list[torch.Tensor]) -> torch.Tensor:
    if len(feats_a) != len(MSF_STAGES) or len(feats_b) != len(MSF_STAGES):
        raise ShapeError(f"self-distillation needs stages {MSF_STAGES}")
    return distill_from_maps([attention_map(a) for a in feats_a],
                             [attention_map(b) for b in feats_b])


def impulse_receptive_field(branch: nn.Module, channels: int, size: int = 31) -> tuple[int, int, int]:
    """Measure a branch's receptive field from the gradient footprint of one output voxel.

    The branch is copied with positive weights and probed at a positive input so
    that no ReLU gates a path; the result is the bounding-box extent per axis of
    the nonzero input gradient at the central output voxel.
    """
    probe = copy.deepcopy(branch).double()
    with torch.no_grad():
        for m in probe.modules():
            if isinstance(m, nn.Conv3d):
                m.weight.fill_(1.0 / m.weight[0].numel())
                if m.bias is not None:
                    m.bias.zero_()
    x = torch.ones(1, channels, size, size, size, dtype=torch.float64, requires_grad=True)
    c = size // 2
    probe(x)[0, :, c, c, c].sum().backward()
    nz = (x.grad[0].abs().sum(dim=0) > 0).nonzero()
    return tuple(int(nz[:, i].max() - nz[:, i].min() + 1) for i in range(3))
