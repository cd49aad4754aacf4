"""Configuration records for the model, training loop and phantom generator."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

STAGES = 4
MSF_MODES = ("off", "local", "ms_output")


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants."""


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 2
    num_classes: int = 4
    base_channels: int = 4
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_multiplier: int = 4
    use_transformer: bool = True
    msf_mode: str = "local"
    self_distill: bool = True
    lambda_sd: float = 0.3
    num_skips: int = 3
    input_shape: tuple[int, int, int] = (32, 32, 32)
    stages: int = STAGES

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.validate()

    def validate(self) -> None:
        if self.stages != STAGES:
            raise ConfigError(f"stages is fixed at {STAGES}, got {self.stages}")
        if self.in_channels < 1 or self.num_classes < 2 or self.base_channels < 1:
            raise ConfigError("in_channels >= 1, num_classes >= 2 and base_channels >= 1 required")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must have 3 dims, got {self.input_shape}")
        factor = 2 ** (self.stages - 1)
        if any(s <= 0 or s % factor for s in self.input_shape):
            raise ConfigError(f"input_shape {self.input_shape} must be divisible by {factor}")
        if all(s == factor for s in self.input_shape):
            # instance normalization needs more than one voxel at the deepest stage
            raise ConfigError(f"input_shape {self.input_shape} leaves a single voxel at stage {self.stages}")
        if self.msf_mode not in MSF_MODES:
            raise ConfigError(f"msf_mode must be one of {MSF_MODES}, got {self.msf_mode!r}")
        if self.msf_mode == "off" and self.self_distill:
            raise ConfigError("self_distill requires msf_mode != 'off'")
        if self.lambda_sd < 0:
            raise ConfigError(f"lambda_sd must be >= 0, got {self.lambda_sd}")
        if self.num_skips not in (0, 1, 2, 3):
            raise ConfigError(f"num_skips must be in 0..3, got {self.num_skips}")
        if self.use_transformer:
            if self.embed_dim < self.base_channels * 8:
                raise ConfigError("embed_dim must be >= base_channels * 8")
            if self.num_layers < 1:
                raise ConfigError("num_layers must be >= 1 when the transformer is enabled")
            if self.num_heads < 1 or self.embed_dim % self.num_heads:
                raise ConfigError("embed_dim must be divisible by num_heads")
            if self.ffn_multiplier < 1:
                raise ConfigError("ffn_multiplier must be >= 1")

    def stage_channels(self, s: int) -> int:
        """Channel count N_s of stage ``s`` (1-based)."""
        return self.base_channels * 2 ** (s - 1)

    def stage_shape(self, s: int) -> tuple[int, int, int]:
        f = 2 ** (s - 1)
        return tuple(d // f for d in self.input_shape)

    @property
    def num_tokens(self) -> int:
        h, w, d = self.stage_shape(self.stages)
        return h * w * d

    def replace(self, **changes: Any) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["input_shape"] = list(self.input_shape)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        return cls(**_known_fields(cls, data))


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 4e-4
    poly_power: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-5
    batch_size: int = 2
    max_iters: int = 300
    seed: int = 0
    checkpoint_every: int = 0
    augment: bool = True
    dtype: str = "float32"

    def __post_init__(self) -> None:
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not self.poly_power > 0:
            raise ConfigError(f"poly_power must be > 0, got {self.poly_power}")
        if self.max_iters < 0:
            raise ConfigError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def replace(self, **changes: Any) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        return cls(**_known_fields(cls, data))


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    num_classes: int = 4
    modalities: int = 2
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if len(self.shape) != 3:
            raise ConfigError("phantom shape must have 3 dims")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.modalities < 1:
            raise ConfigError("modalities must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def replace(self, **changes: Any) -> "PhantomSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["shape"] = list(self.shape)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PhantomSpec":
        return cls(**_known_fields(cls, data))


def toy_config(**changes: Any) -> ModelConfig:
    """Desk-scale config: input 2x32^3, base 4, d=64, L=2, 4 heads, full model."""
    return ModelConfig(**changes)


def reference_config(**changes: Any) -> ModelConfig:
    """Reference-scale config used for complexity accounting (4x128^3, base 16, d=512, L=4).

    The FFN hidden width is a free choice here; a 2d hidden layer keeps the
    parameter total near the reported 10.50M, while 4d alone would put the
    transformer above 14.8M.
    """
    params = dict(
        in_channels=4,
        num_classes=4,
        base_channels=16,
        embed_dim=512,
        num_layers=4,
        num_heads=8,
        ffn_multiplier=2,
        input_shape=(128, 128, 128),
    )
    params.update(changes)
    return ModelConfig(**params)


@dataclass
class RunConfig:
    """A config file: model and train sections, each optional."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict[str, Any]:
        return {"model": self.model.to_dict(), "train": self.train.to_dict()}


def load_run_config(path: str | Path) -> RunConfig:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(data) - {"model", "train"}
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    return RunConfig(
        model=ModelConfig.from_dict(data.get("model", {})),
        train=TrainConfig.from_dict(data.get("train", {})),
    )


def _known_fields(cls: type, data: dict[str, Any]) -> dict[str, Any]:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return dict(data)
