import math

import numpy as np
import pytest
import torch

from missu.config import ModelConfig
from missu.decoder import Decoder, LabelError, combine_losses, seg_loss, total_loss
from missu.encoder import ShapeError
from missu.model import build_model

F64 = torch.float64


def _skips(cfg, b=1):
    return [torch.randn(b, cfg.stage_channels(s), *cfg.stage_shape(s)) for s in (3, 2, 1)]


@pytest.mark.parametrize("num_skips", [0, 1, 2, 3])
def test_logits_full_resolution(num_skips):
    cfg = ModelConfig(num_skips=num_skips)
    dec = Decoder(cfg)
    z4 = torch.randn(1, 32, 4, 4, 4)
    skips = _skips(cfg)[:num_skips] + [None] * (3 - num_skips)
    assert dec(z4, skips).shape == (1, 4, 32, 32, 32)


def test_no_skips_uses_no_skip_channels():
    dec = Decoder(ModelConfig(num_skips=0))
    assert [c.in_channels for c in dec.ups] == [32, 16, 8]
    dec3 = Decoder(ModelConfig(num_skips=3))
    assert [c.in_channels for c in dec3.ups] == [48, 24, 12]


def test_skip_shape_mismatch():
    cfg = ModelConfig()
    dec = Decoder(cfg)
    bad = _skips(cfg)
    bad[1] = torch.randn(1, 8, 8, 8, 8)
    with pytest.raises(ShapeError):
        dec(torch.randn(1, 32, 4, 4, 4), bad)


def test_seg_loss_confident_and_uniform():
    mask = torch.randint(0, 4, (1, 3, 3, 3), generator=torch.Generator().manual_seed(0))
    logits = torch.zeros(1, 4, 3, 3, 3, dtype=F64)
    assert abs(seg_loss(logits, mask).item() - math.log(4)) < 1e-12
    logits.scatter_(1, mask[:, None], 50.0)
    assert seg_loss(logits, mask).item() < 1e-8


def test_seg_loss_two_voxel_oracle():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(3, 2))
    labels = [2, 0]
    expected = 0.0
    for v in range(2):
        col = z[:, v]
        expected += -(col[labels[v]] - math.log(sum(math.exp(c) for c in col)))
    expected /= 2
    logits = torch.from_numpy(z).reshape(1, 3, 2, 1, 1)
    mask = torch.tensor(labels).reshape(1, 2, 1, 1)
    assert abs(seg_loss(logits, mask).item() - expected) < 1e-12


def test_seg_loss_shift_invariance():
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(2, 4, 3, 3, 3, dtype=F64, generator=g)
    mask = torch.randint(0, 4, (2, 3, 3, 3), generator=g)
    shift = torch.randn(2, 1, 3, 3, 3, dtype=F64, generator=g) * 10
    torch.testing.assert_close(seg_loss(logits + shift, mask), seg_loss(logits, mask))


def test_label_out_of_range():
    with pytest.raises(LabelError):
        seg_loss(torch.zeros(1, 4, 2, 2, 2), torch.full((1, 2, 2, 2), 4))


def test_combined_losses():
    assert combine_losses(1.0, 0.5, 0.3) == pytest.approx(1.15)
    l_seg = torch.tensor(0.7)
    assert combine_losses(l_seg, torch.tensor(2.0), 0.0) is l_seg
    assert combine_losses(l_seg, None, 0.3) is l_seg
    with pytest.raises(ValueError):
        combine_losses(l_seg, l_seg, -1.0)
    logits = torch.zeros(1, 4, 2, 2, 2)
    mask = torch.zeros(1, 2, 2, 2, dtype=torch.long)
    assert total_loss(logits, mask, torch.tensor(1.0), 0.5).item() == pytest.approx(math.log(4) + 0.5)


def test_no_sd_means_no_msf_gradients():
    cfg = ModelConfig(self_distill=False)
    model = build_model(cfg, dtype=F64)
    out = model.forward_train(torch.randn(1, 2, 32, 32, 32, dtype=F64))
    loss = combine_losses(seg_loss(out.logits, torch.zeros(1, 32, 32, 32, dtype=torch.long)),
                          None, cfg.lambda_sd)
    loss.backward()
    assert all(p.grad is None for p in model.msf.parameters())
    assert all(p.grad is not None for p in model.decoder.parameters())


def _perturb_msf(model, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.msf.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype))


def test_local_mode_logits_independent_of_msf():
    cfg = ModelConfig()
    model = build_model(cfg, seed=3, dtype=F64)
    slim = build_model(cfg, seed=9, dtype=F64, inference=True)
    assert slim.msf is None
    params = model.export_params()
    slim.load_params(params)
    x = torch.randn(1, 2, 32, 32, 32, dtype=F64)
    with torch.no_grad():
        ref = model(x)
        train_logits = model.forward_train(x).logits
        _perturb_msf(model, 1)
        perturbed = model(x)
        absent = slim(x)
    assert torch.equal(ref, perturbed)
    assert torch.equal(ref, absent)
    assert torch.equal(ref, train_logits)


def test_ms_output_logits_depend_on_msf():
    cfg = ModelConfig(msf_mode="ms_output", self_distill=False)
    model = build_model(cfg, dtype=F64)
    x = torch.randn(1, 2, 32, 32, 32, dtype=F64)
    with torch.no_grad():
        ref = model(x)
        _perturb_msf(model, 2)
        assert not torch.equal(ref, model(x))
