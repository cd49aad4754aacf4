"""Global feature modeling on the deepest stage.

Voxels of A4 become tokens, are embedded to width d with a learnable position
table, pass through L pre-norm transformer layers and are projected back to a
volume Z4 with the shape of A4.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .config import ModelConfig
from .encoder import ShapeError


def to_tokens(vol: torch.Tensor) -> torch.Tensor:
    """(B, N, h, w, d) -> (B, M, N) with M = h*w*d in C order."""
    return vol.flatten(2).transpose(1, 2)


def to_volume(tokens: torch.Tensor, spatial: tuple[int, int, int]) -> torch.Tensor:
    """Inverse of :func:`to_tokens`."""
    b, m, n = tokens.shape
    if m != math.prod(spatial):
        raise ShapeError(f"{m} tokens cannot fill a {spatial} volume")
    return tokens.transpose(1, 2).reshape(b, n, *spatial)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_attn: bool = False):
        b, m, dim = x.shape
        qkv = self.qkv(x).reshape(b, m, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, m, dim)
        out = self.proj(out)
        return (out, attn) if return_attn else out


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, hidden: int):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class TransformerLayer(nn.Module):
    """Z' = MSA(LN(Z)) + Z;  Z_out = FFN(LN(Z')) + Z'."""

    def __init__(self, dim: int, heads: int, ffn_multiplier: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_multiplier * dim)

    def forward(self, z: torch.Tensor, return_attn: bool = False):
        a, attn = self.attn(self.norm1(z), return_attn=True)
        z = z + a
        z = z + self.ffn(self.norm2(z))
        return (z, attn) if return_attn else z


class GlobalTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        n4 = config.stage_channels(config.stages)
        d = config.embed_dim
        self.spatial = config.stage_shape(config.stages)
        self.num_tokens = config.num_tokens
        self.embed = nn.Linear(n4, d, bias=False)
        self.pos_embed = nn.Parameter(torch.empty(1, self.num_tokens, d))
        nn.init.normal_(self.pos_embed, 0.0, 0.02)
        self.layers = nn.ModuleList(
            TransformerLayer(d, config.num_heads, config.ffn_multiplier)
            for _ in range(config.num_layers)
        )
        self.out_proj = nn.Linear(d, n4)

    def tokenize_embed(self, a4: torch.Tensor) -> torch.Tensor:
        tokens = to_tokens(a4)
        if tokens.shape[1] != self.num_tokens:
            raise ShapeError(
                f"A4 gives {tokens.shape[1]} tokens, position table has {self.num_tokens}"
            )
        return self.embed(tokens) + self.pos_embed

    def encode(self, z: torch.Tensor, return_attn: bool = False):
        attns = []
        for layer in self.layers:
            z, attn = layer(z, return_attn=True)
            attns.append(attn)
        return (z, attns) if return_attn else z

    def feature_map(self, z: torch.Tensor) -> torch.Tensor:
        return to_volume(self.out_proj(z), self.spatial)

    def forward(self, a4: torch.Tensor) -> torch.Tensor:
        return self.feature_map(self.encode(self.tokenize_embed(a4)))

