import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import finite_difference_check, sample_entries
from missu.config import ModelConfig
from missu.encoder import Encoder3D, ShapeError


def _encoder(cfg, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return Encoder3D(cfg).to(dtype)


def test_toy_stage_shapes():
    cfg = ModelConfig(in_channels=2, base_channels=4, input_shape=(32, 32, 32))
    feats = _encoder(cfg)(torch.randn(1, 2, 32, 32, 32))
    shapes = [tuple(f.shape[1:]) for f in feats]
    assert shapes == [(4, 32, 32, 32), (8, 16, 16, 16), (16, 8, 8, 8), (32, 4, 4, 4)]


def test_reference_scale_deepest_stage_shape():
    # A4 at 128^3 input with base 16 is 128 x 16^3; shape law checked without running 128^3
    cfg = ModelConfig(in_channels=4, base_channels=16, embed_dim=512, input_shape=(128, 128, 128))
    assert cfg.stage_channels(4) == 128
    assert cfg.stage_shape(4) == (16, 16, 16)
    enc = _encoder(cfg.replace(input_shape=(16, 16, 16)))
    a4 = enc(torch.randn(1, 4, 16, 16, 16))[-1]
    assert a4.shape[1] == 128


def test_zero_input_zero_bias_gives_zero_features():
    cfg = ModelConfig()
    enc = _encoder(cfg)
    feats = enc(torch.zeros(1, 2, 32, 32, 32))
    assert all(torch.count_nonzero(f) == 0 for f in feats)


def test_indivisible_dims_rejected():
    enc = _encoder(ModelConfig())
    with pytest.raises(ShapeError):
        enc(torch.randn(1, 2, 32, 30, 32))
    with pytest.raises(ShapeError):
        enc(torch.randn(1, 3, 32, 32, 32))


@settings(max_examples=12, deadline=None)
@given(
    base=st.integers(1, 4),
    dims=st.tuples(*(st.sampled_from([16, 24, 32]) for _ in range(3))),
)
def test_shape_law_property(base, dims):
    cfg = ModelConfig(base_channels=base, embed_dim=64, input_shape=dims)
    feats = _encoder(cfg)(torch.randn(1, 2, *dims))
    for s, f in enumerate(feats, start=1):
        assert f.shape[1] == base * 2 ** (s - 1)
        assert tuple(f.shape[2:]) == tuple(d // 2 ** (s - 1) for d in dims)


def test_gradient_matches_finite_differences():
    cfg = ModelConfig(base_channels=2, embed_dim=16, input_shape=(8, 8, 16))
    enc = _encoder(cfg, seed=3, dtype=torch.float64)
    x = torch.randn(1, 2, 8, 8, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    w = torch.randn(16, 1, 1, 1, dtype=torch.float64)

    def loss():
        return (enc(x)[-1] * w).sum()

    rng = np.random.default_rng(0)
    results = finite_difference_check(loss, sample_entries(enc.named_parameters(), 25, rng))
    worst = max(r[-1] for r in results)
    assert worst < 1e-3, worst
