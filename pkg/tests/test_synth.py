import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from missu.config import PhantomSpec
from missu.io import Volume
from missu.synth import (
    AugmentParams,
    CropError,
    DegenerateInputError,
    PhantomError,
    Sample,
    apply_augment,
    augment,
    draw_augment_params,
    generate_phantom,
    pad_to_shape,
    zscore_normalize,
)


def test_phantom_deterministic():
    spec = PhantomSpec(seed=5)
    a, b = generate_phantom(spec, 3), generate_phantom(spec, 3)
    np.testing.assert_array_equal(a.volume.data, b.volume.data)
    np.testing.assert_array_equal(a.mask, b.mask)
    c = generate_phantom(spec, 4)
    assert not np.array_equal(a.mask, c.mask)


@pytest.mark.parametrize("index", range(6))
def test_k4_histogram_and_nesting(index):
    s = generate_phantom(PhantomSpec(shape=(32, 32, 32), num_classes=4), index)
    hist = np.bincount(s.mask.ravel(), minlength=4)
    assert (hist > 0).sum() == 4
    c1, c2, c3 = s.mask >= 1, s.mask >= 2, s.mask == 3
    assert np.all(c2 <= c1) and np.all(c3 <= c2)


def test_lesions_not_touching_air():
    s = generate_phantom(PhantomSpec(), 0)
    assert np.all(s.volume.data[:, s.mask > 0] != 0)


def test_k2_and_shape_checks():
    s = generate_phantom(PhantomSpec(shape=(16, 24, 16), num_classes=2, modalities=2), 0)
    assert set(np.unique(s.mask)) == {0, 1}
    assert s.volume.data.shape == (2, 16, 24, 16)
    with pytest.raises(PhantomError):
        generate_phantom(PhantomSpec(shape=(15, 32, 32)))


def test_zscore_two_point():
    data = np.zeros((1, 2, 2, 2), dtype=np.float64)
    data[0, 0, 0, 0], data[0, 1, 1, 1] = 1.0, 3.0
    out = zscore_normalize(Volume(data)).data
    assert out[0, 0, 0, 0] == pytest.approx(-1.0)
    assert out[0, 1, 1, 1] == pytest.approx(1.0)
    assert np.count_nonzero(out) == 2


def test_zscore_degenerate():
    with pytest.raises(DegenerateInputError):
        zscore_normalize(Volume(np.full((1, 3, 3, 3), 2.5)))
    one = np.zeros((2, 3, 3, 3))
    one[0] = 1.0 + np.arange(27).reshape(3, 3, 3)
    one[1, 0, 0, 0] = 4.0
    with pytest.raises(DegenerateInputError):
        zscore_normalize(Volume(one))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_zscore_statistics(seed):
    rng = np.random.default_rng(seed)
    data = rng.normal(3.0, 2.0, size=(2, 6, 6, 6))
    data[rng.random(data.shape) < 0.3] = 0.0
    out = zscore_normalize(Volume(data)).data
    for c in range(2):
        fg = data[c] != 0
        assert abs(out[c][fg].mean()) < 1e-5
        assert abs(out[c][fg].std() - 1.0) < 1e-5
        assert np.all(out[c][~fg] == 0)


def _sample(rng, shape=(8, 8, 8), c=2):
    return Sample(Volume(rng.normal(size=(c, *shape)).astype(np.float32)),
                  rng.integers(0, 4, size=shape).astype(np.uint8))


def test_all_flips_involution():
    s = _sample(np.random.default_rng(0))
    p = AugmentParams((True, True, True), np.zeros(2), np.ones(2), (0, 0, 0))
    twice = apply_augment(apply_augment(s, p, (8, 8, 8)), p, (8, 8, 8))
    np.testing.assert_array_equal(twice.volume.data, s.volume.data)
    np.testing.assert_array_equal(twice.mask, s.mask)


def test_noop_augment_is_identity():
    s = _sample(np.random.default_rng(1))
    p = AugmentParams((False, False, False), np.zeros(2), np.ones(2), (0, 0, 0))
    out = apply_augment(s, p, (8, 8, 8))
    np.testing.assert_array_equal(out.volume.data, s.volume.data)
    np.testing.assert_array_equal(out.mask, s.mask)


def test_flip_frequency_monte_carlo():
    rng = np.random.default_rng(1234)
    flips = np.array([draw_augment_params(rng, 1, (8, 8, 8), (8, 8, 8)).flips for _ in range(10_000)])
    freq = flips.mean(axis=0)
    assert np.all(np.abs(freq - 0.5) < 0.02), freq


def test_intensity_ranges_and_crop_bounds():
    rng = np.random.default_rng(2)
    for _ in range(200):
        p = draw_augment_params(rng, 3, (12, 10, 9), (8, 8, 8))
        assert np.all(np.abs(p.shift) <= 0.1)
        assert np.all((p.scale >= 0.9) & (p.scale <= 1.1))
        assert all(0 <= o <= v - 8 for o, v in zip(p.crop_offset, (12, 10, 9)))


def test_crop_too_large():
    s = _sample(np.random.default_rng(3))
    with pytest.raises(CropError):
        augment(s, np.random.default_rng(0), (9, 8, 8))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_delta_voxel_moves_with_label(seed):
    rng = np.random.default_rng(seed)
    shape = (10, 9, 8)
    vol = np.zeros((1, *shape), dtype=np.float32)
    mask = np.zeros(shape, dtype=np.uint8)
    pos = tuple(int(rng.integers(0, n)) for n in shape)
    vol[(0, *pos)] = 100.0
    mask[pos] = 1
    out = augment(Sample(Volume(vol), mask), rng, (6, 6, 6))
    hot = np.argwhere(out.volume.data[0] > 50)
    lab = np.argwhere(out.mask == 1)
    assert hot.tolist() == lab.tolist()


def test_pad_to_shape():
    s = _sample(np.random.default_rng(4), shape=(8, 6, 8))
    p = pad_to_shape(s, (8, 8, 8))
    assert p.mask.shape == (8, 8, 8)
    np.testing.assert_array_equal(p.mask[:, 1:7, :], s.mask)
