import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fava import bestrq


def brute_force_labels(q, rows):
    """Nearest codebook row by explicit cosine loops over every entry."""
    rows = q.normalize(rows)
    out = []
    for r in rows:
        v = [sum(r[i] * q.projection[i, j] for i in range(q.input_dim)) for j in range(q.code_dim)]
        v = np.array(v)
        v = v / np.linalg.norm(v)
        best, best_sim = 0, -np.inf
        for k in range(q.codebook_size):
            sim = float(np.dot(v, q.codebook[k]))
            if sim > best_sim:
                best, best_sim = k, sim
        out.append(best)
    return np.array(out)


def test_quantizer_reproducible_from_seed():
    a, b = bestrq.init_quantizer(7), bestrq.init_quantizer(7)
    assert np.array_equal(a.projection, b.projection)
    assert np.array_equal(a.codebook, b.codebook)


def test_paper_codebook_shape_and_norms():
    q = bestrq.init_quantizer(0, 320, 16, 8192)
    assert q.codebook.shape == (8192, 16)
    assert q.projection.shape == (320, 16)
    np.testing.assert_allclose(np.linalg.norm(q.codebook, axis=1), 1.0, atol=1e-6)


def test_different_seeds_differ():
    a, b = bestrq.init_quantizer(1), bestrq.init_quantizer(2)
    assert np.mean(a.projection != b.projection) >= 0.99
    assert np.mean(a.codebook != b.codebook) >= 0.99


@pytest.mark.parametrize("T,n", [(8, 2), (9, 2), (100, 25)])
def test_stack_frames_shapes(T, n):
    feat = np.arange(T * 80, dtype=float).reshape(T, 80)
    out = bestrq.stack_frames(feat)
    assert out.shape == (n, 320)
    assert np.array_equal(out[0], feat[:4].reshape(-1))


def test_quantize_matches_brute_force():
    q = bestrq.init_quantizer(3, input_dim=12, code_dim=4, codebook_size=64)
    rows = np.random.default_rng(0).normal(size=(300, 12))
    assert np.array_equal(bestrq.quantize(q, rows), brute_force_labels(q, rows))


def test_quantize_monte_carlo_label_usage():
    q = bestrq.init_quantizer(4, 320, 16, 64)
    rows = np.random.default_rng(1).normal(size=(10_000, 320))
    labels = bestrq.quantize(q, rows)
    assert labels.min() >= 0 and labels.max() < 64
    assert len(np.unique(labels)) >= 32
    sims = (rows @ q.projection) @ q.codebook.T / np.linalg.norm(rows @ q.projection, axis=1)[:, None]
    assert np.array_equal(labels, sims.argmax(axis=1))


def test_quantize_positive_scale_invariance():
    q = bestrq.init_quantizer(5, 320, 16, 256)
    rows = np.random.default_rng(2).normal(size=(50, 320))
    assert np.array_equal(bestrq.quantize(q, rows), bestrq.quantize(q, 3.0 * rows))
    twins = np.vstack([rows[:1], rows[:1]])
    lab = bestrq.quantize(q, twins)
    assert lab[0] == lab[1]


def test_quantizer_stats_are_applied():
    q = bestrq.init_quantizer(0, 8, 4, 16)
    rows = np.random.default_rng(0).normal(size=(20, 8)) * 5 + 2
    qs = q.with_stats(rows.mean(0), rows.std(0))
    manual = bestrq.quantize(q, (rows - rows.mean(0)) / rows.std(0))
    assert np.array_equal(bestrq.quantize(qs, rows), manual)
    with pytest.raises(ValueError):
        q.with_stats(np.zeros(8), np.zeros(8))


def test_mask_edge_probabilities():
    rng = np.random.default_rng(0)
    assert bestrq.sample_mask(100, 0.0, 40, rng).spans == ()
    assert bestrq.sample_mask(10, 1.0, 40, rng).frame_mask.all()


def test_interior_mask_probability_monte_carlo():
    rng = np.random.default_rng(11)
    T = 400
    hits = total = 0
    while total < 100_000:
        m = bestrq.sample_mask(T, 0.01, 40, rng).frame_mask[39:]
        hits += int(m.sum())
        total += m.size
    expected = 1 - 0.99**40
    assert expected == pytest.approx(0.331, abs=5e-4)
    assert abs(hits / total - expected) < 0.01


@settings(max_examples=50, deadline=None)
@given(T=st.integers(1, 300), seed=st.integers(0, 2**31))
def test_unmasked_frames_untouched(T, seed):
    rng = np.random.default_rng(seed)
    feat = rng.normal(size=(T, 80))
    mask = bestrq.sample_mask(T, 0.05, 40, rng)
    out = bestrq.apply_audio_mask(feat, mask, rng)
    keep = ~mask.frame_mask
    assert np.array_equal(out[keep], feat[keep])
    assert out.shape == feat.shape


def test_empty_mask_identity_and_fill_statistics():
    rng = np.random.default_rng(0)
    feat = rng.normal(size=(10_000, 80)) + 5
    assert np.array_equal(bestrq.apply_audio_mask(feat, bestrq.MaskSpec((), 10_000), rng), feat)
    full = bestrq.MaskSpec(((0, 10_000),), 10_000)
    out = bestrq.apply_audio_mask(feat, full, rng)
    assert abs(out.mean()) < 0.01
    assert abs(out.std() - 0.1) < 0.01


def test_target_rate_eligibility():
    aligned = bestrq.mask_at_target_rate(bestrq.MaskSpec(((0, 40),), 100))
    assert aligned[:10].all() and not aligned[10:].any()
    shifted = bestrq.mask_at_target_rate(bestrq.MaskSpec(((2, 40),), 100))
    assert not shifted[0] and shifted[1:10].all() and not shifted[10]
    assert not bestrq.mask_at_target_rate(bestrq.MaskSpec((), 100)).any()
    assert len(aligned) == 25


def test_video_mask_membership():
    rng = np.random.default_rng(0)
    video = rng.uniform(-1, 1, size=(20, 8, 8, 3))
    assert np.array_equal(bestrq.apply_video_mask(video, np.zeros(20, bool), rng), video)
    mask = np.zeros(20, bool)
    mask[5:12] = True
    out = bestrq.apply_video_mask(video, mask, rng)
    assert np.array_equal(out[~mask], video[~mask])
    for frame in out[mask]:
        assert any(np.array_equal(frame, v) for v in video)
    same = np.repeat(video[:1], 20, axis=0)
    assert np.array_equal(bestrq.apply_video_mask(same, mask, rng), same)
    with pytest.raises(ValueError):
        bestrq.apply_video_mask(video, np.zeros(19, bool), rng)


def test_targets_come_from_clean_features():
    q = bestrq.init_quantizer(0, 320, 16, 32)
    feat = np.random.default_rng(0).normal(size=(80, 80))
    mask = bestrq.MaskSpec(((0, 40),), 80)
    t = bestrq.make_targets(q, feat, mask)
    assert np.array_equal(t.labels, bestrq.quantize(q, bestrq.stack_frames(feat)))
    assert t.target_mask[:10].all() and not t.target_mask[10:].any()


def test_mlm_loss_uniform_and_saturated():
    K = 8192
    logits = torch.zeros(5, K, dtype=torch.float64)
    labels = torch.arange(5)
    loss, empty = bestrq.mlm_loss(logits, labels, torch.ones(5, dtype=torch.bool))
    assert not empty
    assert abs(float(loss) - math.log(K)) < 1e-6
    assert math.log(8192) == pytest.approx(9.0109, abs=1e-4)
    sharp = torch.zeros(5, 16, dtype=torch.float64)
    sharp[torch.arange(5), labels] = 100.0
    assert float(bestrq.mlm_loss(sharp, labels, torch.ones(5, dtype=torch.bool))[0]) <= 1e-6


def test_mlm_loss_hand_mean_and_gradient_support():
    rng = np.random.default_rng(0)
    logits = torch.tensor(rng.normal(size=(7, 11)), requires_grad=True)
    labels = torch.tensor(rng.integers(0, 11, 7))
    mask = torch.zeros(7, dtype=torch.bool)
    mask[[1, 3, 6]] = True
    loss, _ = bestrq.mlm_loss(logits, labels, mask)
    x = logits.detach().numpy()
    per = [np.log(np.exp(x[i]).sum()) - x[i, labels[i]] for i in (1, 3, 6)]
    assert float(loss.detach()) == pytest.approx(np.mean(per), rel=1e-12)
    loss.backward()
    assert torch.all(logits.grad[~mask] == 0)


def test_mlm_loss_empty_mask_flag():
    loss, empty = bestrq.mlm_loss(torch.zeros(3, 4), torch.zeros(3, dtype=torch.long),
                                  torch.zeros(3, dtype=torch.bool))
    assert empty and float(loss) == 0.0
