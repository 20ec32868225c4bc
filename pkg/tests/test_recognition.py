import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, hardest_by_enumeration, retrieval_bruteforce
from zipgait.errors import InvalidParameter, ShapeError
from zipgait.net import DiffGait, NetConfig
from zipgait.recognition import (EmbeddingSet, RecognizerConfig, ZipGait, batch_hard_triplet_loss, ce_loss,
                                 embed_sequence, evaluate_retrieval, mine_batch_hard, pairwise_part_distance,
                                 part_ce_loss, retrieval_distances, train_step_zipgait, triplet_loss)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return ZipGait(RecognizerConfig(num_classes=4, fusion_channels=8, width=8, parts=16, dim=16)).eval()


def fused_frames(model, n, seed=0):
    g = torch.Generator().manual_seed(seed)
    sil = torch.rand(n, 1, 64, 44, generator=g)
    heat = torch.rand(n, 2, 64, 44, generator=g)
    with torch.no_grad():
        return list(model.fusion(sil, heat))


# -- embedding ----------------------------------------------------------------

def test_embedding_shapes(model):
    sil, heat = torch.rand(2, 3, 1, 64, 44), torch.rand(2, 3, 2, 64, 44)
    emb, logits = model(sil, heat)
    assert emb.shape == (2, 16, 16)
    assert logits.shape == (2, 16, 4)
    assert torch.isfinite(emb).all()


def test_single_frame_temporal_max_is_identity(model):
    frame = fused_frames(model, 1)[0]
    with torch.no_grad():
        direct = model.mapping(model.backbone(frame[None]))[0]
    assert torch.equal(torch.from_numpy(embed_sequence([frame], model).parts), direct)


def test_embedding_invariant_to_order_and_duplication(model):
    frames = fused_frames(model, 6, seed=1)
    base = embed_sequence(frames, model).parts
    perm = [frames[i] for i in (3, 0, 5, 1, 4, 2)]
    assert np.array_equal(embed_sequence(perm, model).parts, base)
    dup = [f for f in frames for _ in range(2)]
    assert np.array_equal(embed_sequence(dup, model).parts, base)


def test_empty_sequence_rejected(model):
    with pytest.raises(InvalidParameter):
        embed_sequence([], model)


def test_parts_must_divide_height():
    m = ZipGait(RecognizerConfig(num_classes=2, fusion_channels=4, width=4, parts=5, dim=4))
    with pytest.raises(ShapeError):
        m(torch.rand(1, 1, 1, 64, 44), torch.rand(1, 1, 2, 64, 44))


# -- losses -------------------------------------------------------------------

def _embeddings_at(d_ap, d_an):
    a = torch.zeros(1, 1, 2)
    return a, torch.tensor([[[d_ap, 0.0]]]), torch.tensor([[[0.0, d_an]]])


def test_triplet_values():
    assert triplet_loss(*_embeddings_at(1.0, 3.0), margin=0.2).item() == 0.0
    assert triplet_loss(*_embeddings_at(2.0, 1.0), margin=0.2).item() == pytest.approx(1.2, abs=1e-6)
    with pytest.raises(ShapeError):
        triplet_loss(torch.zeros(1, 2, 2), torch.zeros(1, 2, 2), torch.zeros(1, 3, 2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_triplet_nonnegative_and_zero_iff_margin_met(seed):
    g = torch.Generator().manual_seed(seed)
    a, p, n = (torch.randn(2, 4, 3, generator=g, dtype=torch.float64) for _ in range(3))
    loss = triplet_loss(a, p, n)
    gap = ((a - p).norm(dim=-1) - (a - n).norm(dim=-1) + 0.2)
    assert loss.item() >= 0
    assert (loss.item() == 0) == bool((gap <= 0).all())


def test_batch_hard_mining_matches_enumeration():
    rng = np.random.default_rng(0)
    for trial in range(20):
        n = int(rng.integers(4, 33))
        labels = rng.integers(0, max(2, n // 4), size=n)
        pts = rng.normal(size=(n, 5))
        dist = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
        pos, neg = mine_batch_hard(torch.from_numpy(dist), torch.from_numpy(labels))
        expected = hardest_by_enumeration(dist, labels.tolist())
        for a, (p, q) in enumerate(expected):
            if p < 0:  # no valid triplet: the miner flags the missing role
                assert pos[a] == -1 or neg[a] == -1
            else:
                assert (pos[a].item(), neg[a].item()) == (p, q), trial


def test_batch_hard_loss_zero_when_margin_satisfied():
    # two tight clusters far apart
    emb = torch.zeros(4, 2, 3)
    emb[2:] += 10.0
    emb[1] += 0.01
    emb[3] += 0.01
    assert batch_hard_triplet_loss(emb, torch.tensor([0, 0, 1, 1])).item() == 0.0


def test_batch_hard_loss_ignores_self_as_positive():
    emb = torch.randn(3, 2, 4)
    # every anchor is alone in its class, so no triplet exists
    assert batch_hard_triplet_loss(emb, torch.tensor([0, 1, 2])).item() == 0.0


def test_cross_entropy_closed_forms():
    assert ce_loss(torch.zeros(10), 3).item() == pytest.approx(math.log(10), abs=1e-6)
    logits = torch.zeros(10)
    logits[4] = 1000.0
    assert ce_loss(logits, 4).item() == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(InvalidParameter):
        ce_loss(torch.zeros(1), 0)


def test_cross_entropy_matches_extended_precision():
    rng = np.random.default_rng(1)
    mpmath.mp.dps = 50
    for _ in range(50):
        n = int(rng.integers(2, 40))
        logits = rng.normal(scale=float(rng.uniform(0.1, 30)), size=n)
        label = int(rng.integers(n))
        ref = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in logits)) - mpmath.mpf(float(logits[label]))
        got = ce_loss(torch.from_numpy(logits), label).item()
        assert abs(got - float(ref)) < 1e-6


def test_cross_entropy_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(12, generator=g, dtype=torch.float64, requires_grad=True)
    ce_loss(logits, 5).backward()
    with torch.no_grad():
        for i in range(12):
            numeric = central_difference(lambda: ce_loss(logits, 5).item(), logits, (i,), 1e-6)
            assert abs(logits.grad[i].item() - numeric) / max(abs(numeric), 1e-12) < 1e-5


def test_part_ce_averages_parts():
    logits = torch.randn(3, 4, 6)
    labels = torch.tensor([0, 5, 2])
    manual = sum(ce_loss(logits[b], int(labels[b])) for b in range(3)) / 3
    assert part_ce_loss(logits, labels).item() == pytest.approx(manual.item(), abs=1e-6)


def test_recognition_losses_gradient_check():
    torch.manual_seed(3)
    m = ZipGait(RecognizerConfig(num_classes=3, fusion_channels=4, width=4, parts=4, dim=8)).double()
    g = torch.Generator().manual_seed(4)
    sil = torch.rand(6, 2, 1, 64, 44, generator=g, dtype=torch.float64)
    heat = torch.rand(6, 2, 2, 64, 44, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 1, 2, 2])

    def loss():
        emb, logits = m(sil, heat)
        return batch_hard_triplet_loss(emb, labels, 0.2) + part_ce_loss(logits, labels)

    m.zero_grad()
    loss().backward()
    candidates = [(p, tuple(i)) for p in m.parameters() for i in torch.nonzero(p.grad.abs() > 1e-7).tolist()]
    rng = np.random.default_rng(0)
    worst = 0.0
    with torch.no_grad():
        for k in rng.choice(len(candidates), size=60, replace=False):
            p, idx = candidates[k]
            numeric = central_difference(lambda: loss().item(), p, idx, 1e-6)
            analytic = p.grad[idx].item()
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    assert worst < 1e-4


# -- training -----------------------------------------------------------------

def test_training_step_leaves_frozen_diffgait_untouched():
    torch.manual_seed(5)
    diffgait = DiffGait(NetConfig(C=8)).requires_grad_(False)
    before = {k: v.clone() for k, v in diffgait.state_dict().items()}
    m = ZipGait(RecognizerConfig(num_classes=2, fusion_channels=4, width=4, parts=4, dim=4))
    opt = torch.optim.SGD(m.parameters(), lr=0.1, momentum=0.9)
    sil, heat = torch.rand(4, 2, 1, 64, 44), torch.rand(4, 2, 2, 64, 44)
    vals = train_step_zipgait(m, (sil, heat, torch.tensor([0, 0, 1, 1])), opt)
    assert set(vals) == {"triplet", "ce", "total"}
    assert all(torch.equal(before[k], v) for k, v in diffgait.state_dict().items())


# -- retrieval ----------------------------------------------------------------

def sets_from(labels, seqs, dim=3):
    return [EmbeddingSet(np.zeros((1, dim), dtype=np.float32), str(l), str(s)) for l, s in zip(labels, seqs)]


def test_gallery_equals_probe_constructed_case():
    rng = np.random.default_rng(0)
    gallery = []
    for ident in range(5):
        centre = rng.normal(size=(2, 4)) * 100
        for seq in range(2):
            gallery.append(EmbeddingSet(centre + rng.normal(size=(2, 4)) * 0.01, f"id{ident}", f"s{seq}"))
    result = evaluate_retrieval(gallery, gallery)
    assert result.rank1 == 1.0 and result.excluded_probes == 0


def test_tie_breaks_by_gallery_index():
    gallery = sets_from(["b", "a"], ["g0", "g1"])
    probe = sets_from(["a"], ["p"])
    dist = np.array([[1.0, 1.0]])
    assert evaluate_retrieval(gallery, probe, dist).rank1 == 0.0
    gallery = sets_from(["a", "b"], ["g0", "g1"])
    assert evaluate_retrieval(gallery, probe, dist).rank1 == 1.0


def test_probe_without_match_is_excluded():
    gallery = sets_from(["a", "b"], ["s0", "s0"])
    probe = sets_from(["a", "c"], ["s0", "s1"])
    result = evaluate_retrieval(gallery, probe, np.zeros((2, 2)))
    assert result.excluded_probes == 2
    assert (result.rank1, result.mAP) == (0.0, 0.0)


def test_metrics_match_bruteforce_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(50):
        g_labels = rng.integers(0, 8, size=50).tolist()
        g_seqs = rng.integers(0, 3, size=50).tolist()
        p_labels = rng.integers(0, 9, size=20).tolist()
        p_seqs = rng.integers(0, 3, size=20).tolist()
        # coarse values force plenty of exact ties
        dist = rng.integers(0, 12, size=(20, 50)).astype(np.float64)
        got = evaluate_retrieval(sets_from(g_labels, g_seqs), sets_from(p_labels, p_seqs), dist)
        ref = retrieval_bruteforce(dist, [str(v) for v in p_labels], [str(v) for v in p_seqs],
                                   [str(v) for v in g_labels], [str(v) for v in g_seqs])
        assert (got.rank1, got.rank5, got.mAP, got.mINP, got.excluded_probes) == ref


def test_distance_is_sum_of_part_distances():
    rng = np.random.default_rng(3)
    g = [EmbeddingSet(rng.normal(size=(4, 3)), "a", "0") for _ in range(3)]
    p = [EmbeddingSet(rng.normal(size=(4, 3)), "a", "1")]
    emb = torch.from_numpy(np.stack([e.parts for e in p + g]))
    parts = pairwise_part_distance(emb)  # (P, B, B)
    assert np.allclose(retrieval_distances(g, p)[0], parts.sum(0)[0, 1:].numpy(), atol=1e-9)
