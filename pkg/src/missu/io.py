"""Binary volume/mask files and checkpoint archives.

Volume file layout (little-endian)::

    magic    4s   b"MVOL" (volumes) or b"MSEG" (masks)
    version  u16
    dtype    u16  code from DTYPE_CODES
    dims     4*u32  C, H, W, D
    spacing  3*f32
    payload  C*H*W*D items, C-order

Masks always carry C=1 and dtype uint8.

A checkpoint is a zip archive holding ``manifest.json`` plus one raw blob per
tensor. Entries are written in sorted order with fixed timestamps so that
identical states produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .config import ModelConfig, TrainConfig

VOLUME_MAGIC = b"MVOL"
MASK_MAGIC = b"MSEG"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHH4I3f")
MAX_ELEMENTS = 2**34

DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("u1"),
    4: np.dtype("<i2"),
    5: np.dtype("<i4"),
}
_CODE_FOR_DTYPE = {dt: code for code, dt in DTYPE_CODES.items()}

CHECKPOINT_FORMAT = "missu-checkpoint"
CHECKPOINT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class DimensionOverflowError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Volume:
    """Multi-modality intensity tensor of shape (C, H, W, D)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.data.ndim != 4:
            raise VolumeFormatError(f"volume must be 4-D (C,H,W,D), got shape {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


def volume_payload_nbytes(dims: tuple[int, int, int, int], dtype: np.dtype) -> int:
    n = 1
    for d in dims:
        n *= int(d)
    return n * np.dtype(dtype).itemsize


def encode_volume(data: np.ndarray, magic: bytes = VOLUME_MAGIC,
                  spacing=(1.0, 1.0, 1.0)) -> bytes:
    data = np.asarray(data)
    if data.ndim != 4:
        raise VolumeFormatError(f"expected 4-D array, got shape {data.shape}")
    code = _CODE_FOR_DTYPE.get(data.dtype.newbyteorder("<"))
    if code is None:
        raise VolumeFormatError(f"unsupported dtype {data.dtype}")
    if magic == MASK_MAGIC and (code != 3 or data.shape[0] != 1):
        raise VolumeFormatError("masks must be single-channel uint8")
    header = HEADER.pack(magic, FORMAT_VERSION, code, *data.shape, *map(float, spacing))
    payload = np.ascontiguousarray(data, dtype=DTYPE_CODES[code]).tobytes()
    return header + payload


def decode_volume(buf: bytes, expect_magic: bytes | None = None) -> tuple[np.ndarray, bytes, tuple]:
    if len(buf) < HEADER.size:
        raise TruncatedPayloadError(f"file is {len(buf)} bytes, shorter than the {HEADER.size}-byte header")
    magic, version, code, c, h, w, d, *spacing = HEADER.unpack_from(buf)
    if magic not in (VOLUME_MAGIC, MASK_MAGIC) or (expect_magic and magic != expect_magic):
        want = expect_magic or b"MVOL|MSEG"
        raise BadMagicError(f"bad magic {magic!r}, expected {want!r}")
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"unsupported format version {version}")
    if code not in DTYPE_CODES:
        raise VolumeFormatError(f"unknown dtype code {code}")
    dims = (c, h, w, d)
    if min(dims) == 0 or c * h * w * d > MAX_ELEMENTS:
        raise DimensionOverflowError(f"dims {dims} are empty or exceed {MAX_ELEMENTS} elements")
    dtype = DTYPE_CODES[code]
    expected = volume_payload_nbytes(dims, dtype)
    actual = len(buf) - HEADER.size
    if actual < expected:
        raise TruncatedPayloadError(f"payload has {actual} bytes, header implies {expected}")
    if actual > expected:
        raise VolumeFormatError(f"payload has {actual - expected} trailing bytes")
    data = np.frombuffer(buf, dtype=dtype, count=c * h * w * d, offset=HEADER.size)
    return data.reshape(dims).copy(), magic, tuple(spacing)


def write_volume(volume: Volume | np.ndarray, path: str | Path) -> None:
    if isinstance(volume, np.ndarray):
        volume = Volume(volume)
    Path(path).write_bytes(encode_volume(volume.data, VOLUME_MAGIC, volume.spacing))


def read_volume(path: str | Path) -> Volume:
    data, _, spacing = decode_volume(Path(path).read_bytes(), VOLUME_MAGIC)
    return Volume(data, spacing=spacing)


def write_mask(mask: np.ndarray, path: str | Path, spacing=(1.0, 1.0, 1.0)) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise VolumeFormatError(f"mask must be 3-D (H,W,D), got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() > 255):
        raise VolumeFormatError("mask labels must fit in uint8")
    Path(path).write_bytes(encode_volume(mask.astype(np.uint8)[None], MASK_MAGIC, spacing))


def read_mask(path: str | Path) -> np.ndarray:
    data, _, _ = decode_volume(Path(path).read_bytes(), MASK_MAGIC)
    if data.shape[0] != 1 or data.dtype != np.uint8:
        raise VolumeFormatError("mask file must be single-channel uint8")
    return data[0]


@dataclass
class Checkpoint:
    """Serializable snapshot of a training run.

    ``params`` maps parameter names to arrays; ``groups`` maps the same names to
    one of ``theta_e``, ``theta_p`` or ``theta_d``. ``optimizer`` holds Adam
    moments keyed ``exp_avg/<name>`` and ``exp_avg_sq/<name>``.
    """

    model_config: ModelConfig
    train_config: TrainConfig
    step: int
    params: dict[str, np.ndarray]
    groups: dict[str, str]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    def group_names(self) -> set[str]:
        return set(self.groups.values())

    def without_group(self, group: str) -> "Checkpoint":
        keep = {n for n, g in self.groups.items() if g != group}
        return Checkpoint(
            model_config=self.model_config,
            train_config=self.train_config,
            step=self.step,
            params={n: a for n, a in self.params.items() if n in keep},
            groups={n: g for n, g in self.groups.items() if n in keep},
            optimizer={k: a for k, a in self.optimizer.items() if k.split("/", 1)[1] in keep},
            extra=dict(self.extra),
        )


def _tensor_entry(name: str, arr: np.ndarray, blob: str, group: str) -> dict[str, Any]:
    return {
        "name": name,
        "group": group,
        "dtype": arr.dtype.str,
        "shape": list(arr.shape),
        "blob": blob,
        "sha256": hashlib.sha256(arr.tobytes()).hexdigest(),
    }


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    if hasattr(ckpt, "to_checkpoint"):
        ckpt = ckpt.to_checkpoint()
    tensors, blobs = [], {}
    for i, name in enumerate(sorted(ckpt.params)):
        arr = _le(ckpt.params[name])
        blob = f"tensors/{i:05d}.bin"
        tensors.append(_tensor_entry(name, arr, blob, ckpt.groups[name]))
        blobs[blob] = arr.tobytes()
    moments = []
    for i, key in enumerate(sorted(ckpt.optimizer)):
        arr = _le(ckpt.optimizer[key])
        blob = f"optimizer/{i:05d}.bin"
        moments.append(_tensor_entry(key, arr, blob, "optimizer"))
        blobs[blob] = arr.tobytes()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": int(ckpt.step),
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "tensors": tensors,
        "optimizer": moments,
        "extra": ckpt.extra,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
        for blob in sorted(blobs):
            _write_entry(zf, blob, blobs[blob])


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def read_manifest(path: str | Path) -> dict[str, Any]:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive ({exc})") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unexpected format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> Checkpoint:
    manifest = read_manifest(path)
    model_config = ModelConfig.from_dict(manifest["model_config"])
    if expected_config is not None and expected_config != model_config:
        diff = sorted(
            k for k, v in expected_config.to_dict().items() if model_config.to_dict().get(k) != v
        )
        raise ConfigMismatchError(f"checkpoint config differs in fields: {diff}")
    params, groups, optimizer = {}, {}, {}
    with zipfile.ZipFile(path) as zf:
        for entry in manifest["tensors"]:
            params[entry["name"]] = _read_tensor(zf, entry)
            groups[entry["name"]] = entry["group"]
        for entry in manifest["optimizer"]:
            optimizer[entry["name"]] = _read_tensor(zf, entry)
    return Checkpoint(
        model_config=model_config,
        train_config=TrainConfig.from_dict(manifest["train_config"]),
        step=int(manifest["step"]),
        params=params,
        groups=groups,
        optimizer=optimizer,
        extra=manifest.get("extra", {}),
    )


def _read_tensor(zf: zipfile.ZipFile, entry: dict[str, Any]) -> np.ndarray:
    raw = zf.read(entry["blob"])
    if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
        raise CheckpointError(f"tensor {entry['name']} failed its checksum")
    arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
    return arr.reshape(entry["shape"]).copy()


def strip_group(src: str | Path, dst: str | Path, group: str = "theta_p") -> None:
    """Copy a checkpoint without the tensors (and moments) of ``group``."""
    save_checkpoint(load_checkpoint(src).without_group(group), dst)
