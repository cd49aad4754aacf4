"""Analytic parameter and multiply-accumulate counts for the two graphs.

Counts cover convolutions, linear layers and the attention matmuls
(QK^T and AV). Normalization layers contribute parameters only; activations,
softmax and upsampling are not counted. FLOPs are reported as 2 x MACs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .config import ModelConfig
from .msf import BRANCH_LAYOUT, MSF_STAGES

GRAPHS = ("training_graph", "inference_graph")
FLOP_CONVENTION = "FLOPs = 2 x MACs (conv, linear, attention matmuls)"

# reported totals for the reference-scale model, input 4x128^3
REFERENCE_INFERENCE_PARAMS = 10.50e6
REFERENCE_MS_OUTPUT_PARAMS = 17.38e6
REFERENCE_INFERENCE_GFLOPS = 132.11
REFERENCE_MS_OUTPUT_GFLOPS = 196.61


@dataclass(frozen=True)
class LayerCount:
    name: str
    group: str
    params: int
    macs: int


@dataclass
class ComplexityReport:
    graph: str
    input_shape: tuple[int, ...]
    layers: list[LayerCount] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def by_group(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for l in self.layers:
            g = out.setdefault(l.group, {"params": 0, "macs": 0})
            g["params"] += l.params
            g["macs"] += l.macs
        return out

    def to_dict(self) -> dict:
        return {
            "graph": self.graph,
            "input_shape": list(self.input_shape),
            "convention": FLOP_CONVENTION,
            "params": self.params,
            "macs": self.macs,
            "gflops": self.flops / 1e9,
            "groups": self.by_group(),
        }


class _Counter:
    def __init__(self) -> None:
        self.layers: list[LayerCount] = []

    def conv(self, name, group, cin, cout, k, out_voxels, bias=True):
        w = cin * cout * k**3
        self.layers.append(LayerCount(name, group, w + (cout if bias else 0), w * out_voxels))

    def norm(self, name, group, channels):
        self.layers.append(LayerCount(name, group, 2 * channels, 0))

    def linear(self, name, group, din, dout, tokens, bias=True):
        self.layers.append(LayerCount(name, group, din * dout + (dout if bias else 0), din * dout * tokens))

    def table(self, name, group, size):
        self.layers.append(LayerCount(name, group, size, 0))

    def matmul(self, name, group, macs):
        self.layers.append(LayerCount(name, group, 0, macs))


def _encoder(c: _Counter, cfg: ModelConfig) -> None:
    prev = cfg.in_channels
    for s in range(1, cfg.stages + 1):
        n, vox = cfg.stage_channels(s), math.prod(cfg.stage_shape(s))
        if s > 1:
            c.conv(f"encoder.down{s}", "theta_e", prev, n, 3, vox)
            prev = n
        for b in range(2):
            c.conv(f"encoder.stage{s}.block{b}.conv", "theta_e", prev, n, 3, vox)
            c.norm(f"encoder.stage{s}.block{b}.norm", "theta_e", n)
            prev = n


def _transformer(c: _Counter, cfg: ModelConfig) -> None:
    n4, d, m = cfg.stage_channels(cfg.stages), cfg.embed_dim, cfg.num_tokens
    hidden = cfg.ffn_multiplier * d
    c.linear("transformer.embed", "theta_e", n4, d, m, bias=False)
    c.table("transformer.pos_embed", "theta_e", m * d)
    for l in range(cfg.num_layers):
        p = f"transformer.layer{l}"
        c.norm(f"{p}.norm1", "theta_e", d)
        c.linear(f"{p}.qkv", "theta_e", d, 3 * d, m)
        c.matmul(f"{p}.scores", "theta_e", m * m * d)
        c.matmul(f"{p}.weighted_values", "theta_e", m * m * d)
        c.linear(f"{p}.proj", "theta_e", d, d, m)
        c.norm(f"{p}.norm2", "theta_e", d)
        c.linear(f"{p}.ffn1", "theta_e", d, hidden, m)
        c.linear(f"{p}.ffn2", "theta_e", hidden, d, m)
    c.linear("transformer.out_proj", "theta_e", d, n4, m)


def _msf(c: _Counter, cfg: ModelConfig) -> None:
    for s in MSF_STAGES:
        n, vox = cfg.stage_channels(s), math.prod(cfg.stage_shape(s))
        for b, layout in enumerate(BRANCH_LAYOUT):
            for i, (k, _rate) in enumerate(layout):
                c.conv(f"msf.stage{s}.branch{b + 1}.conv{i}", "theta_p", n, n, k, vox)
    for s in MSF_STAGES[1:]:
        n, n_prev, vox = cfg.stage_channels(s), cfg.stage_channels(s - 1), math.prod(cfg.stage_shape(s))
        c.conv(f"msf.pyramid{s}.lateral", "theta_p", n, n, 1, vox)
        c.conv(f"msf.pyramid{s}.bottom_up", "theta_p", n_prev, n, 3, vox)


def _decoder(c: _Counter, cfg: ModelConfig) -> None:
    prev = cfg.stage_channels(cfg.stages)
    for i, s in enumerate((3, 2, 1)):
        n, vox = cfg.stage_channels(s), math.prod(cfg.stage_shape(s))
        cin = prev + (n if i < cfg.num_skips else 0)
        c.conv(f"decoder.up{s}.conv", "theta_d", cin, n, 3, vox)
        prev = n
    c.conv("decoder.head", "theta_d", prev, cfg.num_classes, 1, math.prod(cfg.input_shape))


def msf_in_graph(cfg: ModelConfig, graph: str) -> bool:
    if cfg.msf_mode == "off":
        return False
    if cfg.msf_mode == "ms_output":
        return True
    return graph == "training_graph"


def count_complexity(cfg: ModelConfig, graph: str = "inference_graph") -> ComplexityReport:
    if graph not in GRAPHS:
        raise ValueError(f"graph must be one of {GRAPHS}, got {graph!r}")
    c = _Counter()
    _encoder(c, cfg)
    if cfg.use_transformer:
        _transformer(c, cfg)
    if msf_in_graph(cfg, graph):
        _msf(c, cfg)
    _decoder(c, cfg)
    return ComplexityReport(graph, (cfg.in_channels, *cfg.input_shape), c.layers)


def compare_graphs(cfg: ModelConfig) -> dict:
    train = count_complexity(cfg, "training_graph")
    infer = count_complexity(cfg, "inference_graph")
    return {
        "training_graph": train.to_dict(),
        "inference_graph": infer.to_dict(),
        "delta": {"params": train.params - infer.params, "gflops": (train.flops - infer.flops) / 1e9},
    }


def format_side_by_side(cfg: ModelConfig) -> str:
    train = count_complexity(cfg, "training_graph")
    infer = count_complexity(cfg, "inference_graph")
    groups = sorted(set(train.by_group()) | set(infer.by_group()))
    lines = [
        f"input {train.input_shape}; {FLOP_CONVENTION}",
        f"{'group':<10}{'train params':>15}{'infer params':>15}{'train GFLOPs':>15}{'infer GFLOPs':>15}",
    ]
    tg, ig = train.by_group(), infer.by_group()
    for g in groups:
        t, i = tg.get(g, {"params": 0, "macs": 0}), ig.get(g, {"params": 0, "macs": 0})
        lines.append(f"{g:<10}{t['params']:>15,}{i['params']:>15,}"
                     f"{2 * t['macs'] / 1e9:>15.3f}{2 * i['macs'] / 1e9:>15.3f}")
    lines.append(f"{'total':<10}{train.params:>15,}{infer.params:>15,}"
                 f"{train.flops / 1e9:>15.3f}{infer.flops / 1e9:>15.3f}")
    return "\n".join(lines)
