import math

import numpy as np
import pytest
import torch

from oracles import central_difference
from zipgait import data_io
from zipgait.engine import diffgait_loss
from zipgait.errors import ShapeError
from zipgait.net import DiffGait, GaitMapping, NetConfig, count_params, hybrid_gait_volume, sinusoidal_embedding
from zipgait.schedule import cosine_schedule


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return DiffGait(NetConfig(C=16)).eval()


def randomize_head(m, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        m.decoder.head.weight.copy_(torch.randn(m.decoder.head.weight.shape, generator=g, dtype=m.decoder.head.weight.dtype) * 0.1)
        m.decoder.head.bias.copy_(torch.randn(1, generator=g, dtype=m.decoder.head.bias.dtype) * 0.1)


def test_encoder_shapes(model):
    heat = torch.rand(3, 2, 64, 44)
    assert model.encode_condition(heat).shape == (3, 16, 16, 11)
    assert model.map_sample(torch.rand(3, 1, 64, 44)).shape == (3, 16, 16, 11)
    assert model.feature_shape == (16, 16, 11)


def test_shape_errors(model):
    with pytest.raises(ShapeError):
        model.encode_condition(torch.rand(1, 2, 64, 40))
    with pytest.raises(ShapeError):
        model.map_sample(torch.rand(1, 2, 64, 44))


def test_zero_heatmap_finite_and_deterministic(model):
    heat = torch.zeros(2, 2, 64, 44)
    a = model.encode_condition(heat)
    b = model.encode_condition(heat)
    assert torch.isfinite(a).all()
    assert torch.equal(a, b)


def test_encoder_sensitive_to_weights():
    torch.manual_seed(1)
    m = DiffGait(NetConfig(C=16)).eval()
    heat = torch.rand(1, 2, 64, 44)
    before = m.encode_condition(heat)
    with torch.no_grad():
        m.encoder.stem.weight[0, 0, 1, 1] += 1e-3
    assert (m.encode_condition(heat) - before).abs().max() > 0


def test_gait_mapping_linear_at_zero():
    gm = GaitMapping(NetConfig(C=16))
    with torch.no_grad():
        gm.conv1.bias.zero_()
        gm.conv2.bias.zero_()
    assert torch.equal(gm(torch.zeros(1, 1, 64, 44)), torch.zeros(1, 16, 16, 11))


def test_gait_mapping_separates_noise(model):
    g = torch.Generator().manual_seed(2)
    for _ in range(10):
        a, b = torch.randn(2, 1, 1, 64, 44, generator=g)
        assert not torch.equal(model.map_sample(a), model.map_sample(b))


def test_timestep_embedding_distinct(model):
    t = torch.arange(1000)
    emb = model.embed_time(t).detach().double()
    assert not torch.equal(emb[0], emb[999])
    assert torch.equal(model.embed_time(torch.tensor([7])), model.embed_time(torch.tensor([7])))
    d = torch.cdist(emb, emb)
    d.fill_diagonal_(math.inf)
    assert d.min() > 1e-6
    raw = sinusoidal_embedding(t, 16)
    d = torch.cdist(raw, raw)
    d.fill_diagonal_(math.inf)
    assert d.min() > 1e-6


def test_hgv_identities():
    g = torch.Generator().manual_seed(3)
    g_ske = torch.randn(2, 8, 16, 11, generator=g, dtype=torch.float64)
    mapped = torch.randn(2, 8, 16, 11, generator=g, dtype=torch.float64)
    temb = torch.randn(2, 8, generator=g, dtype=torch.float64)
    assert torch.equal(hybrid_gait_volume(g_ske, torch.zeros_like(mapped), torch.zeros_like(temb)), g_ske)
    assert torch.equal(hybrid_gait_volume(torch.zeros_like(g_ske), mapped, temb), torch.zeros_like(g_ske))
    hgv = hybrid_gait_volume(g_ske, mapped, temb)
    term = g_ske * mapped + g_ske * temb.reshape(2, 8, 1, 1)
    assert (hgv - g_ske - term).abs().max() < 1e-6


def test_hgv_equals_condition_when_mapping_and_embedding_vanish():
    torch.manual_seed(4)
    m = DiffGait(NetConfig(C=16)).eval()
    with torch.no_grad():
        m.gait_mapping.conv2.weight.zero_()
        m.gait_mapping.conv2.bias.zero_()
        m.time_embed.fc2.weight.zero_()
        m.time_embed.fc2.bias.zero_()
    heat = torch.rand(2, 2, 64, 44)
    g_ske = m.encode_condition(heat)
    hgv = m.build_hgv(g_ske, torch.randn(2, 1, 64, 44), torch.tensor([3, 900]))
    assert torch.equal(hgv, g_ske)


def test_decoder_range_and_shape(model):
    randomize_head(model)
    out = model.decode(torch.randn(2, *model.feature_shape) * 50)
    assert out.shape == (2, 1, 64, 44)
    assert out.min() >= -1 and out.max() <= 1


def test_decoder_head_starts_at_zero():
    m = DiffGait(NetConfig(C=8))
    assert torch.equal(m.decode(torch.randn(1, *m.feature_shape)), torch.zeros(1, 1, 64, 44))


def test_full_network_is_pure(model):
    heat, x, t = torch.rand(2, 2, 64, 44), torch.randn(2, 1, 64, 44), torch.tensor([5, 600])
    assert torch.equal(model(heat, x, t), model(heat, x, t))
    assert torch.equal(model(heat, x, t), model(heat, x, t, g_ske=model.encode_condition(heat)))


def test_parameter_budget():
    n = count_params(DiffGait())
    assert 1.5e6 <= n <= 2.5e6
    counts = [count_params(DiffGait(NetConfig(C=c))) for c in (8, 16, 32, 64)]
    assert counts == sorted(counts) and len(set(counts)) == 4


def test_param_count_matches_checkpoint_manifest(tmp_path):
    m = DiffGait()
    data_io.save_checkpoint(tmp_path / "m.ckpt", {"diffgait": m}, {"config": {}, "step": 0})
    ckpt = data_io.load_checkpoint(tmp_path / "m.ckpt")
    assert ckpt.param_count("diffgait") == count_params(m)
    # independent tally straight from the manifest shapes
    shapes = [a["shape"] for a in ckpt.manifest["arrays"] if a["group"] == "diffgait"]
    assert sum(int(np.prod(s)) for s in shapes) == count_params(m)


def test_gradients_match_finite_differences():
    torch.manual_seed(5)
    m = DiffGait(NetConfig(C=8)).double()
    randomize_head(m)
    sched = cosine_schedule(1000)
    g = torch.Generator().manual_seed(6)
    heat = torch.rand(2, 2, 64, 44, generator=g, dtype=torch.float64)
    gt = torch.rand(2, 1, 64, 44, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(2, 1, 64, 44, generator=g, dtype=torch.float64)
    t = torch.tensor([40, 700])

    def loss():
        return diffgait_loss(m, heat, gt, t, eps, sched)

    m.zero_grad()
    loss().backward()
    # entries whose analytic gradient vanishes identically (biases feeding a per-channel
    # group norm) carry no signal for a relative-error test, so sample among the rest
    candidates = [(p, idx) for p in m.parameters() for idx in torch.nonzero(p.grad.abs() > 1e-7).tolist()]
    rng = np.random.default_rng(0)
    picks = rng.choice(len(candidates), size=60, replace=False)
    worst = 0.0
    with torch.no_grad():
        for k in picks:
            p, idx = candidates[k]
            idx = tuple(idx)
            numeric = central_difference(lambda: loss().item(), p, idx, 1e-6)
            analytic = p.grad[idx].item()
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    assert worst < 1e-4
