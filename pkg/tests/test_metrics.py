import numpy as np
import pytest

from helpers import brute_accuracy, brute_dice, brute_hausdorff
from missu.metrics import (
    EmptyRegionError,
    MetricShapeError,
    accuracy,
    boundary,
    dice,
    evaluate,
    extract_regions,
    hausdorff,
)
from missu.synth import generate_phantom
from missu.config import PhantomSpec


def _flat(n, on):
    m = np.zeros(n, dtype=bool)
    m[list(on)] = True
    return m


def test_dice_examples():
    p = _flat(10, range(4))
    t = _flat(10, range(1, 7))
    assert dice(p, t) == pytest.approx(0.6)
    assert dice(p, p) == 1.0
    assert dice(_flat(10, [0]), _flat(10, [5])) == 0.0
    assert dice(np.zeros(5, bool), np.zeros(5, bool)) == 1.0
    assert dice(np.zeros(5, bool), _flat(5, [1])) == 0.0


def test_accuracy_examples():
    # TP=8, TN=80, FP=2, FN=10
    p = _flat(100, list(range(8)) + [8, 9])
    t = _flat(100, list(range(8)) + list(range(10, 20)))
    assert accuracy(p, t) == pytest.approx(0.88)
    assert accuracy(t, t) == 1.0
    assert accuracy(np.zeros(100, bool), _flat(100, range(10))) == pytest.approx(0.90)


def test_hausdorff_examples():
    a = np.zeros((8, 8, 8), bool)
    b = a.copy()
    a[1, 2, 2] = True
    b[6, 2, 2] = True
    assert hausdorff(a, b) == 5.0
    assert hausdorff(a, a) == 0.0
    with pytest.raises(EmptyRegionError):
        hausdorff(a, np.zeros_like(a))


def test_shape_mismatch():
    with pytest.raises(MetricShapeError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(MetricShapeError):
        evaluate(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_boundary_counts_array_edge_as_background():
    full = np.ones((3, 3, 3), bool)
    b = boundary(full)
    assert b.sum() == 26 and not b[1, 1, 1]


def test_random_pairs_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        shape = tuple(rng.integers(1, 9, size=3))
        p = rng.random(shape) < rng.uniform(0.05, 0.6)
        t = rng.random(shape) < rng.uniform(0.05, 0.6)
        assert dice(p, t) == brute_dice(p, t)
        assert accuracy(p, t) == brute_accuracy(p, t)
        if p.any() and t.any():
            assert hausdorff(p, t) == brute_hausdorff(p, t)
            assert hausdorff(p, t) == hausdorff(t, p)
        assert dice(p, t) == dice(t, p)
        assert 0.0 <= dice(p, t) <= 1.0


def test_regions_on_phantom():
    mask = generate_phantom(PhantomSpec(), 0).mask
    regions = extract_regions(mask)
    wt, tc, et = regions["WT"], regions["TC"], regions["ET"]
    assert not (tc & ~wt).any() and not (et & ~tc).any()
    assert wt.sum() == sum((mask == k).sum() for k in (1, 2, 3))
    empty = extract_regions(np.zeros((4, 4, 4), np.uint8))
    assert not any(r.any() for r in empty.values())


def test_region_sets_by_class_count():
    assert list(extract_regions(np.zeros(3, np.uint8), 2)) == ["FG"]
    assert list(extract_regions(np.zeros(3, np.uint8), 4)) == ["WT", "TC", "ET"]


def test_evaluate_report():
    mask = generate_phantom(PhantomSpec(), 1).mask
    rep = evaluate(mask, mask)
    assert rep.mean_dice == 1.0
    assert all(v == 0.0 for v in rep.hausdorff.values())
    pred = np.zeros_like(mask)
    rep = evaluate(pred, mask, empty_hd=-1.0)
    assert rep.dice["ET"] == 0.0 and rep.hausdorff["WT"] == -1.0
    assert rep.to_dict()["hausdorff_units"] == "voxels"
