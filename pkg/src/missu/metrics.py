"""Overlap, accuracy and boundary-distance metrics for label volumes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

NESTED_REGIONS = {"WT": (1, 2, 3), "TC": (2, 3), "ET": (3,)}

_SIX_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


class MetricShapeError(ValueError):
    pass


class EmptyRegionError(ValueError):
    """Hausdorff distance is undefined for an empty region."""


def _check(p: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p, t = np.asarray(p, dtype=bool), np.asarray(t, dtype=bool)
    if p.shape != t.shape:
        raise MetricShapeError(f"shape mismatch: {p.shape} vs {t.shape}")
    return p, t


def dice(p: np.ndarray, t: np.ndarray) -> float:
    """2|P∩T| / (|P|+|T|); 1.0 when both sets are empty."""
    p, t = _check(p, t)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def accuracy(p: np.ndarray, t: np.ndarray) -> float:
    """(TP + TN) / all voxels for binary region masks."""
    p, t = _check(p, t)
    if p.size == 0:
        raise MetricShapeError("accuracy of an empty volume")
    return float((p == t).sum()) / p.size


def boundary(region: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one six-connected background neighbor.

    Voxels outside the array count as background.
    """
    region = np.asarray(region, dtype=bool)
    padded = np.pad(region, 1)
    interior = ndimage.binary_erosion(padded, structure=_SIX_NEIGHBORS, border_value=0)
    return (padded & ~interior)[(slice(1, -1),) * region.ndim]


def _directed(src: np.ndarray, dst: np.ndarray) -> float:
    # distance from every voxel to the nearest dst voxel, read off at src voxels
    dist = ndimage.distance_transform_edt(~dst)
    return float(dist[src].max())


def hausdorff(p: np.ndarray, t: np.ndarray) -> float:
    """Symmetric Hausdorff distance between the boundary voxel sets, in voxels."""
    p, t = _check(p, t)
    if not p.any() or not t.any():
        raise EmptyRegionError("Hausdorff distance needs two nonempty regions")
    bp, bt = boundary(p), boundary(t)
    return max(_directed(bp, bt), _directed(bt, bp))


def extract_regions(mask: np.ndarray, num_classes: int = 4) -> dict[str, np.ndarray]:
    """Evaluation regions: nested WT/TC/ET for K=4, one foreground for K=2,
    one region per label otherwise."""
    mask = np.asarray(mask)
    if num_classes == 4:
        return {name: np.isin(mask, labels) for name, labels in NESTED_REGIONS.items()}
    if num_classes == 2:
        return {"FG": mask == 1}
    return {f"class{k}": mask == k for k in range(1, num_classes)}


@dataclass
class MetricsReport:
    dice: dict[str, float] = field(default_factory=dict)
    accuracy: dict[str, float] = field(default_factory=dict)
    hausdorff: dict[str, float | None] = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))

    def to_dict(self) -> dict:
        return {"dice": self.dice, "accuracy": self.accuracy, "hausdorff": self.hausdorff,
                "mean_dice": self.mean_dice, "hausdorff_units": "voxels"}


def evaluate(pred: np.ndarray, truth: np.ndarray, num_classes: int = 4,
             empty_hd: float | None = None) -> MetricsReport:
    """Per-region metrics.

    Where one side of a region is empty the Hausdorff distance is undefined; it
    is reported as ``empty_hd`` (None by default) instead of raising.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise MetricShapeError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    report = MetricsReport()
    pr, tr = extract_regions(pred, num_classes), extract_regions(truth, num_classes)
    for name in tr:
        report.dice[name] = dice(pr[name], tr[name])
        report.accuracy[name] = accuracy(pr[name], tr[name])
        if pr[name].any() and tr[name].any():
            report.hausdorff[name] = hausdorff(pr[name], tr[name])
        elif not pr[name].any() and not tr[name].any():
            report.hausdorff[name] = 0.0
        else:
            report.hausdorff[name] = empty_hd
    return report
