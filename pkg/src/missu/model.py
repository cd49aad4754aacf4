"""The full network and its parameter grouping.

Parameters fall in three groups, keyed by module prefix:

* ``theta_e``: ``encoder.*`` and ``transformer.*``
* ``theta_p``: ``msf.*`` (MSF blocks and fusion pyramid)
* ``theta_d``: ``decoder.*``

With ``msf_mode="local"`` the deployable graph never reads ``theta_p``, so an
inference model is built without the MSF module at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .decoder import Decoder
from .encoder import Encoder3D
from .msf import MSF, MSF_STAGES, self_distill_loss
from .transformer import GlobalTransformer

GROUPS = ("theta_e", "theta_p", "theta_d")
_PREFIX_GROUP = {"encoder": "theta_e", "transformer": "theta_e", "msf": "theta_p", "decoder": "theta_d"}


class MissingParametersError(KeyError):
    pass


def param_group(name: str) -> str:
    return _PREFIX_GROUP[name.split(".", 1)[0]]


@dataclass
class TrainOutput:
    logits: torch.Tensor
    stem_feats: list[torch.Tensor]
    msf_feats: list[torch.Tensor] | None
    l_sd: torch.Tensor | None


class MISSU(nn.Module):
    def __init__(self, config: ModelConfig, inference: bool = False):
        super().__init__()
        self.config = config
        self.inference = inference
        self.encoder = Encoder3D(config)
        self.transformer = GlobalTransformer(config) if config.use_transformer else None
        keep_msf = config.msf_mode == "ms_output" or (config.msf_mode == "local" and not inference)
        self.msf = MSF(config) if keep_msf else None
        self.decoder = Decoder(config)

    def _decode(self, feats, msf_feats) -> torch.Tensor:
        a4 = feats[-1]
        z4 = self.transformer(a4) if self.transformer is not None else a4
        source = msf_feats if self.config.msf_mode == "ms_output" else feats[: len(MSF_STAGES)]
        return self.decoder(z4, list(reversed(source)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Deployable forward pass; MSF runs only in ``ms_output`` mode."""
        feats = self.encoder(x)
        msf_feats = self.msf(feats) if self.config.msf_mode == "ms_output" else None
        return self._decode(feats, msf_feats)

    def forward_train(self, x: torch.Tensor) -> TrainOutput:
        """Training graph: also runs MSF (if present) and the distillation loss.

        Without ``self_distill`` the distillation value is computed detached, for
        logging only.
        """
        feats = self.encoder(x)
        msf_feats, l_sd = None, None
        if self.msf is not None:
            if self.config.self_distill or self.config.msf_mode == "ms_output":
                msf_feats = self.msf(feats)
            else:
                with torch.no_grad():
                    msf_feats = self.msf(feats)
            l_sd = self_distill_loss(feats[: len(MSF_STAGES)], msf_feats)
            if not self.config.self_distill:
                l_sd = l_sd.detach()
        logits = self._decode(feats, msf_feats)
        return TrainOutput(logits, feats, msf_feats, l_sd)

    def named_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        out = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            out[param_group(name)].append((name, p))
        return out

    def export_params(self) -> dict[str, np.ndarray]:
        return {n: p.detach().cpu().numpy().copy() for n, p in self.named_parameters()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        """Load every parameter this model owns; surplus ``theta_p`` tensors are ignored."""
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(params))
        if missing:
            groups = sorted({param_group(n) for n in missing})
            raise MissingParametersError(f"checkpoint lacks {len(missing)} tensors from {groups}")
        surplus = [n for n in params if n not in own and param_group(n) != "theta_p"]
        if surplus:
            raise MissingParametersError(f"checkpoint has unknown tensors: {sorted(surplus)[:5]}")
        with torch.no_grad():
            for name, p in own.items():
                arr = params[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise MissingParametersError(
                        f"{name}: checkpoint shape {arr.shape} != model shape {tuple(p.shape)}"
                    )
                p.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(p.dtype))


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32,
                inference: bool = False) -> MISSU:
    """Seeded construction that leaves the global torch RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MISSU(config, inference=inference)
    return model.to(dtype)
