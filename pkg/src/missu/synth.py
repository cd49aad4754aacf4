"""Seeded synthetic phantoms, foreground z-score normalization and augmentation.

A phantom is an ellipsoidal "head" of background tissue holding a chain of
nested, homothetic lesion ellipsoids. With K=4 the labels mimic the BraTS
convention (1 outer ring, 2 inner core, 3 innermost), so that the evaluation
regions {1,2,3} ⊇ {2,3} ⊇ {3} are nested by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import PhantomSpec
from .io import Volume

MIN_PHANTOM_SIDE = 16


class PhantomError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class CropError(ValueError):
    pass


@dataclass
class Sample:
    volume: Volume
    mask: np.ndarray

    def __post_init__(self) -> None:
        if self.mask.shape != self.volume.spatial_shape:
            raise ValueError(
                f"mask shape {self.mask.shape} != volume spatial shape {self.volume.spatial_shape}"
            )


def sample_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Independent stream per (seed, sample index)."""
    return np.random.default_rng([int(seed), int(index)])


def _ellipsoid(grid: np.ndarray, center: np.ndarray, axes: np.ndarray) -> np.ndarray:
    r = ((grid - center[:, None, None, None]) / axes[:, None, None, None]) ** 2
    return r.sum(axis=0) <= 1.0


def generate_phantom(spec: PhantomSpec, index: int = 0) -> Sample:
    """Build one phantom; deterministic in ``(spec.seed, index)``."""
    shape = np.array(spec.shape)
    if shape.min() < MIN_PHANTOM_SIDE:
        raise PhantomError(f"phantom needs >= {MIN_PHANTOM_SIDE} voxels per axis, got {spec.shape}")
    rng = sample_rng(spec.seed, index)
    grid = np.indices(spec.shape, dtype=np.float64)

    mid = (shape - 1) / 2.0
    head_axes = shape / 2.0 * rng.uniform(0.8, 0.95, size=3)
    head = _ellipsoid(grid, mid, head_axes)

    n_lesion = spec.num_classes - 1
    # outermost lesion sits well inside the head
    axes = head_axes * rng.uniform(0.65, 0.8, size=3)
    axes = np.maximum(axes, 2.5)
    offset = rng.uniform(-1, 1, size=3) * (head_axes - axes) * 0.5
    center = mid + offset

    mask = np.zeros(spec.shape, dtype=np.uint8)
    inside = head.copy()
    for label in range(1, n_lesion + 1):
        region = inside & _ellipsoid(grid, center, axes)
        mask[region] = label
        inside = region
        # next ellipsoid is homothetic and strictly contained in this one
        shrink = rng.uniform(0.7, 0.8)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        step = rng.uniform(0.0, 0.5) * (1.0 - shrink)
        center = center + direction * step * axes
        axes = axes * shrink

    counts = np.bincount(mask.ravel(), minlength=spec.num_classes)
    if (counts == 0).any():
        raise PhantomError(f"phantom {index} is missing classes: voxel counts {counts.tolist()}")

    # per-modality class intensities; each class differs from its parent by >= 0.4 in every
    # modality, and modality 0 rises with the label so all classes are pairwise distinct there
    levels = np.empty((spec.modalities, spec.num_classes))
    levels[:, 0] = rng.uniform(0.8, 1.2, size=spec.modalities)
    for label in range(1, spec.num_classes):
        sign = rng.choice([-1.0, 1.0], size=spec.modalities)
        sign[0] = 1.0
        step = sign * rng.uniform(0.4, 0.8, size=spec.modalities)
        nxt = levels[:, label - 1] + step
        levels[:, label] = np.where(nxt < 0.2, levels[:, label - 1] - step, nxt)

    data = levels[:, mask] + spec.noise_sigma * rng.normal(size=(spec.modalities, *spec.shape))
    data = np.where(head[None], data, 0.0).astype(np.float32)
    vol = Volume(data, meta={"seed": spec.seed, "index": index, "kind": "phantom"})
    return Sample(vol, mask)


def zscore_normalize(volume: Volume) -> Volume:
    """Normalize each modality over its nonzero voxels; zeros stay zero."""
    data = volume.data.astype(np.float64)
    out = np.zeros_like(data)
    for c in range(data.shape[0]):
        fg = data[c] != 0
        if fg.sum() < 2:
            raise DegenerateInputError(f"modality {c} has fewer than 2 nonzero voxels")
        vals = data[c][fg]
        std = vals.std()
        if std == 0:
            raise DegenerateInputError(f"modality {c} foreground is constant")
        out[c][fg] = (vals - vals.mean()) / std
    return Volume(out.astype(volume.data.dtype), spacing=volume.spacing, meta=dict(volume.meta))


def pad_to_shape(sample: Sample, shape: tuple[int, int, int]) -> Sample:
    """Zero-pad (symmetrically) up to ``shape``; axes already large enough are untouched."""
    pads = []
    for have, want in zip(sample.mask.shape, shape):
        extra = max(want - have, 0)
        pads.append((extra // 2, extra - extra // 2))
    data = np.pad(sample.volume.data, [(0, 0), *pads])
    mask = np.pad(sample.mask, pads)
    return Sample(Volume(data, sample.volume.spacing, dict(sample.volume.meta)), mask)


@dataclass(frozen=True)
class AugmentParams:
    flips: tuple[bool, bool, bool]
    shift: np.ndarray
    scale: np.ndarray
    crop_offset: tuple[int, int, int]


def draw_augment_params(rng: np.random.Generator, channels: int,
                        volume_shape: tuple[int, int, int],
                        crop_shape: tuple[int, int, int]) -> AugmentParams:
    if any(c > v for c, v in zip(crop_shape, volume_shape)):
        raise CropError(f"crop {crop_shape} larger than volume {volume_shape}")
    flips = tuple(bool(f) for f in rng.random(3) < 0.5)
    shift = rng.uniform(-0.1, 0.1, size=channels)
    scale = rng.uniform(0.9, 1.1, size=channels)
    offset = tuple(int(rng.integers(0, v - c + 1)) for c, v in zip(crop_shape, volume_shape))
    return AugmentParams(flips, shift, scale, offset)


def apply_augment(sample: Sample, params: AugmentParams,
                  crop_shape: tuple[int, int, int]) -> Sample:
    data, mask = sample.volume.data, sample.mask
    if any(c > v for c, v in zip(crop_shape, mask.shape)):
        raise CropError(f"crop {crop_shape} larger than volume {mask.shape}")
    for axis, flip in enumerate(params.flips):
        if flip:
            data = np.flip(data, axis=axis + 1)
            mask = np.flip(mask, axis=axis)
    sl = tuple(slice(o, o + c) for o, c in zip(params.crop_offset, crop_shape))
    data = data[(slice(None), *sl)]
    mask = mask[sl]
    scale = np.asarray(params.scale, dtype=np.float64)[:, None, None, None]
    shift = np.asarray(params.shift, dtype=np.float64)[:, None, None, None]
    data = (data * scale + shift).astype(sample.volume.data.dtype)
    return Sample(
        Volume(np.ascontiguousarray(data), sample.volume.spacing, dict(sample.volume.meta)),
        np.ascontiguousarray(mask),
    )


def augment(sample: Sample, rng: np.random.Generator,
            crop_shape: tuple[int, int, int] | None = None) -> Sample:
    """Random axis flips (p=0.5 each), per-modality scale/shift and a random crop."""
    crop_shape = tuple(crop_shape or sample.mask.shape)
    params = draw_augment_params(rng, sample.volume.channels, sample.mask.shape, crop_shape)
    return apply_augment(sample, params, crop_shape)


def generate_dataset(spec: PhantomSpec, count: int, normalize: bool = True) -> list[Sample]:
    samples = []
    for i in range(count):
        s = generate_phantom(spec, i)
        if normalize:
            s = Sample(zscore_normalize(s.volume), s.mask)
        samples.append(s)
    return samples
