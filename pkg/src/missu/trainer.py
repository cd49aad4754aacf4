"""Adam + poly-lr training loop, checkpoint/resume, evaluation and the ablation grid.

Randomness in the loop is derived statelessly from ``(seed, step)``: the
per-epoch sample permutation from ``(seed, epoch)`` and augmentation draws
from ``(seed, step, slot)``. Resuming at step k therefore replays the exact
same trajectory as an uninterrupted run.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .config import ModelConfig, TrainConfig
from .decoder import combine_losses, seg_loss
from .io import Checkpoint, load_checkpoint, save_checkpoint
from .metrics import evaluate
from .model import MISSU, build_model, param_group
from .synth import Sample, apply_augment, draw_augment_params

log = logging.getLogger(__name__)

DETERMINISTIC_ENV = "MISSU_DETERMINISTIC"


class EmptyDatasetError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    """Raised before the update of a step whose loss is not finite.

    ``snapshot`` holds the parameters and moments as they were before the step.
    """

    def __init__(self, message: str, snapshot: Checkpoint):
        super().__init__(message)
        self.snapshot = snapshot


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") not in ("", "0", "false")


def configure_determinism(enabled: bool | None = None) -> bool:
    """Turn on deterministic kernels; returns whether 64-bit mode should be used."""
    enabled = deterministic_mode() if enabled is None else enabled
    if enabled:
        torch.use_deterministic_algorithms(True)
    return enabled


def poly_lr(t: int, total: int, lr0: float, power: float) -> float:
    """lr0 * (1 - t/T)^power for 0 <= t <= T."""
    if total <= 0:
        raise ValueError("poly schedule needs T >= 1")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr0 * (1.0 - t / total) ** power


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


@dataclass
class TrainState:
    model_config: ModelConfig
    train_config: TrainConfig
    model: MISSU
    optimizer: torch.optim.Adam
    step: int = 0
    lr: float = 0.0

    @property
    def dtype(self) -> torch.dtype:
        return torch_dtype(self.train_config.dtype)

    def _named(self) -> dict[str, torch.nn.Parameter]:
        return dict(self.model.named_parameters())

    def to_checkpoint(self) -> Checkpoint:
        params = self.model.export_params()
        moments = {}
        for name, p in self._named().items():
            st = self.optimizer.state.get(p)
            if not st:
                continue
            for key in ("exp_avg", "exp_avg_sq", "step"):
                moments[f"{key}/{name}"] = torch.as_tensor(st[key]).detach().cpu().numpy().copy()
        return Checkpoint(
            model_config=self.model_config,
            train_config=self.train_config,
            step=self.step,
            params=params,
            groups={n: param_group(n) for n in params},
            optimizer=moments,
            extra={"lr": self.lr},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, train_config: TrainConfig | None = None) -> "TrainState":
        state = init_state(ckpt.model_config, train_config or ckpt.train_config)
        state.model.load_params(ckpt.params)
        named = state._named()
        for name, p in named.items():
            if f"exp_avg/{name}" not in ckpt.optimizer:
                continue
            state.optimizer.state[p] = {
                key: torch.from_numpy(ckpt.optimizer[f"{key}/{name}"].copy())
                for key in ("exp_avg", "exp_avg_sq", "step")
            }
        state.step = ckpt.step
        state.lr = float(ckpt.extra.get("lr", 0.0))
        return state


def init_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    dtype = torch_dtype(train_config.dtype)
    model = build_model(model_config, seed=train_config.seed, dtype=dtype)
    opt = torch.optim.Adam(
        model.parameters(),
        lr=train_config.lr0,
        betas=train_config.betas,
        eps=train_config.epsilon,
        foreach=False,
    )
    return TrainState(model_config, train_config, model, opt, 0, train_config.lr0)


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> list[int]:
    """Sample indices for one step: consecutive slots of per-epoch permutations."""
    out = []
    for j in range(batch_size):
        pos = step * batch_size + j
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
        out.append(int(perm[offset]))
    return out


def assemble_batch(state: TrainState, dataset: list[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    cfg = state.train_config
    crop = state.model_config.input_shape
    vols, masks = [], []
    for j, idx in enumerate(batch_indices(cfg.seed, state.step, cfg.batch_size, len(dataset))):
        s = dataset[idx]
        if cfg.augment or s.mask.shape != crop:
            rng = np.random.default_rng([cfg.seed, 2, state.step, j])
            params = draw_augment_params(rng, s.volume.channels, s.mask.shape, crop)
            if not cfg.augment:
                # crop only
                params = type(params)((False,) * 3, np.zeros_like(params.shift),
                                      np.ones_like(params.scale), params.crop_offset)
            s = apply_augment(s, params, crop)
        vols.append(s.volume.data)
        masks.append(s.mask)
    x = torch.from_numpy(np.stack(vols)).to(state.dtype)
    y = torch.from_numpy(np.stack(masks).astype(np.int64))
    return x, y


def compute_losses(model: MISSU, x: torch.Tensor, y: torch.Tensor, lam: float):
    out = model.forward_train(x)
    l_seg = seg_loss(out.logits, y)
    l_sd = out.l_sd if model.config.self_distill else None
    return combine_losses(l_seg, l_sd, lam), l_seg, out.l_sd


def train_step(state: TrainState, batch: tuple[torch.Tensor, torch.Tensor]) -> dict:
    """One forward/backward/Adam update at the poly learning rate for ``state.step``."""
    total = state.train_config.max_iters
    lr = poly_lr(state.step, total, state.train_config.lr0, state.train_config.poly_power)
    x, y = batch
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    loss, l_seg, l_sd = compute_losses(state.model, x, y, state.model_config.lambda_sd)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss.item()} at step {state.step}",
                                 state.to_checkpoint())
    loss.backward()
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    record = {
        "t": state.step,
        "lr": lr,
        "l_seg": l_seg.item(),
        "l_sd": None if l_sd is None else l_sd.item(),
        "loss": loss.item(),
    }
    state.step += 1
    state.lr = lr
    return record


def run_training(model_config: ModelConfig, train_config: TrainConfig, dataset: list[Sample],
                 out_dir: str | Path | None = None, state: TrainState | None = None,
                 stop_at: int | None = None) -> tuple[TrainState, list[dict]]:
    """Train until ``max_iters`` (or ``stop_at``); returns the final state and step log.

    With ``out_dir`` set, a JSON-lines log, periodic checkpoints and
    ``final.ckpt`` are written there.
    """
    if not dataset:
        raise EmptyDatasetError("training dataset is empty")
    state = state or init_state(model_config, train_config)
    stop = train_config.max_iters if stop_at is None else min(stop_at, train_config.max_iters)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    records = []
    log_file = open(out / "train_log.jsonl", "a") if out is not None else None
    try:
        while state.step < stop:
            rec = train_step(state, assemble_batch(state, dataset))
            records.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
            if rec["t"] % 25 == 0:
                log.info("t=%d lr=%.3g loss=%.4f", rec["t"], rec["lr"], rec["loss"])
            every = train_config.checkpoint_every
            if out is not None and every and state.step % every == 0:
                save_checkpoint(state.to_checkpoint(), out / f"step_{state.step:06d}.ckpt")
    finally:
        if log_file:
            log_file.close()
    if out is not None:
        save_checkpoint(state.to_checkpoint(), out / "final.ckpt")
    return state, records


def resume(path: str | Path, dataset: list[Sample], out_dir=None) -> tuple[TrainState, list[dict]]:
    ckpt = load_checkpoint(path)
    state = TrainState.from_checkpoint(ckpt)
    return run_training(ckpt.model_config, ckpt.train_config, dataset, out_dir, state=state)


@torch.no_grad()
def predict(model: MISSU, volume: np.ndarray) -> np.ndarray:
    """Argmax label map for one (C, H, W, D) volume."""
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(volume)[None]).to(dtype)
    return model(x)[0].argmax(dim=0).numpy().astype(np.uint8)


def evaluate_dataset(model: MISSU, samples: Iterable[Sample]) -> list:
    k = model.config.num_classes
    reports = []
    for s in samples:
        diag = float(np.linalg.norm(s.mask.shape))
        reports.append(evaluate(predict(model, s.volume.data), s.mask, k, empty_hd=diag))
    return reports


ABLATION_ROWS = (
    ("base", dict(use_transformer=False, msf_mode="off", self_distill=False)),
    ("transformer", dict(use_transformer=True, msf_mode="off", self_distill=False)),
    ("msf_local", dict(use_transformer=False, msf_mode="local", self_distill=False)),
    ("msf_local+sd", dict(use_transformer=False, msf_mode="local", self_distill=True)),
    ("transformer+msf_local", dict(use_transformer=True, msf_mode="local", self_distill=False)),
    ("transformer+msf_ms_output", dict(use_transformer=True, msf_mode="ms_output", self_distill=False)),
    ("transformer+msf_local+sd", dict(use_transformer=True, msf_mode="local", self_distill=True)),
)


def ablation_grid(base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    return [(name, base.replace(**flags)) for name, flags in ABLATION_ROWS]


@dataclass
class AblationRow:
    name: str
    config: ModelConfig
    per_seed: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        out = {}
        for metric in ("dice", "accuracy", "hausdorff"):
            out[metric] = {}
            for region in self.per_seed[0][metric]:
                vals = np.array([run[metric][region] for run in self.per_seed], dtype=float)
                out[metric][region] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def to_dict(self) -> dict:
        c = self.config
        return {
            "name": self.name,
            "transformer": c.use_transformer,
            "msf_local": c.msf_mode == "local",
            "msf_ms_output": c.msf_mode == "ms_output",
            "self_distill": c.self_distill,
            "per_seed": self.per_seed,
            "summary": self.summary(),
        }


def _mean_report(reports) -> dict:
    out = {}
    for metric in ("dice", "accuracy", "hausdorff"):
        out[metric] = {r: float(np.mean([getattr(rep, metric)[r] for rep in reports]))
                       for r in getattr(reports[0], metric)}
    return out


def run_ablation(base: ModelConfig, train_config: TrainConfig, train_set: list[Sample],
                 eval_set: list[Sample], seeds: Iterable[int],
                 rows: list[tuple[str, ModelConfig]] | None = None) -> list[AblationRow]:
    """Train every grid row once per seed on identical data; evaluate on ``eval_set``."""
    seeds = list(seeds)
    results = []
    for name, cfg in rows or ablation_grid(base):
        row = AblationRow(name, cfg)
        for seed in seeds:
            state, _ = run_training(cfg, train_config.replace(seed=seed), train_set)
            row.per_seed.append(_mean_report(evaluate_dataset(state.model, eval_set)))
            log.info("ablation %s seed %d: %s", name, seed, row.per_seed[-1]["dice"])
        results.append(row)
    return results


def _check(flag: bool) -> str:
    return "x" if flag else "-"


def format_ablation(rows: list[AblationRow]) -> str:
    """Plain-text table: flags, then mean(std) of Dice (%), Hausdorff (voxels) and ACC (%)."""
    regions = list(rows[0].per_seed[0]["dice"])
    head = f"{'Trans':>5} {'MSF-l':>5} {'MSF-ms':>6} {'SD':>3} | "
    head += " ".join(f"{'Dice ' + r:>13}" for r in regions) + " | "
    head += " ".join(f"{'HD ' + r:>13}" for r in regions) + " | "
    head += " ".join(f"{'ACC ' + r:>13}" for r in regions)
    lines = [head, "-" * len(head)]
    for row in rows:
        d, s = row.to_dict(), row.summary()
        cells = [f"{_check(d['transformer']):>5} {_check(d['msf_local']):>5} "
                 f"{_check(d['msf_ms_output']):>6} {_check(d['self_distill']):>3} |"]
        for metric, scale in (("dice", 100), ("hausdorff", 1), ("accuracy", 100)):
            vals = [f"{s[metric][r]['mean'] * scale:7.2f}({s[metric][r]['std'] * scale:4.2f})"
                    for r in regions]
            cells.append(" ".join(f"{v:>13}" for v in vals) + " |")
        lines.append(" ".join(cells).rstrip(" |") + f"  {row.name}")
    return "\n".join(lines)


def finite_report(rows: list[AblationRow]) -> bool:
    return all(
        math.isfinite(v["mean"]) and math.isfinite(v["std"])
        for row in rows for metric in row.summary().values() for v in metric.values()
    )
