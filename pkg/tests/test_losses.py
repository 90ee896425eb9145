import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from mgrnet import ShapeError
from mgrnet import autodiff as ad
from mgrnet.core import DIRECTIONS
from mgrnet.graph import distance_matrix, token_adjacency
from mgrnet.losses import (
    ce_loss,
    grmm_terms,
    loss_terms,
    margin_loss,
    modality_recon_loss,
    multi_modal_recon_loss,
    recon_feature_loss,
    recon_structure_loss,
)
from mgrnet.reasoning import head_forward
from mgrnet.training import TrainConfig


def test_feature_loss_examples(rng):
    x = rng.normal(size=(4, 3))
    assert recon_feature_loss(x, x) == 0.0
    y = x.copy()
    y[2, 1] += 2.0
    assert recon_feature_loss(y, x) == pytest.approx(1.0, abs=1e-12)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    ref = sum((a[i, j] - b[i, j]) ** 2 for i in range(3) for j in range(2)) / 3
    assert recon_feature_loss(a, b) == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ShapeError):
        recon_feature_loss(a, b[:2])


def test_structure_loss_examples(rng):
    a = rng.random((4, 4))
    assert recon_structure_loss(a, a) == 0.0
    b = a.copy()
    b[0, 3] += 2.0
    assert recon_structure_loss(b, a) == pytest.approx(1.0, abs=1e-12)
    c, d = rng.random((3, 3)), rng.random((3, 3))
    ref = sum((c[i, j] - d[i, j]) ** 2 for i in range(3) for j in range(3)) / 3
    assert recon_structure_loss(c, d) == pytest.approx(ref, abs=1e-12)


@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31))
def test_recon_terms_nonnegative_and_zero_at_identity(n, d, seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(n, d)), r.normal(size=(n, d))
    assert recon_feature_loss(x, y) >= 0 and recon_structure_loss(x @ x.T, y @ y.T) >= 0
    assert recon_feature_loss(x, x) == 0 and recon_structure_loss(x @ x.T, x @ x.T) == 0


def test_grmm_terms_match_composed_oracle(tiny_params, rng):
    tokens = rng.normal(size=(2, 3, 7, 8))
    l_f, l_s = grmm_terms(tiny_params, tokens)
    rec, raw, _ = head_forward(tiny_params, tokens)
    for b in range(2):
        for i, d in enumerate(DIRECTIONS):
            tgt = "RNT".index(d[2])
            ref_f = np.sum((rec[b, i] - tokens[b, tgt]) ** 2) / 7
            ref_s = np.sum((raw[b, i] - token_adjacency(distance_matrix(tokens[b, tgt]))) ** 2) / 7
            assert l_f[b, i] == pytest.approx(ref_f, abs=1e-12)
            assert l_s[b, i] == pytest.approx(ref_s, abs=1e-12)


def test_recon_loss_zero_when_heads_are_exact(tiny_config):
    from mgrnet import init_params

    p = init_params(tiny_config, 0)
    # every token row equal and nonnegative: propagation averages equal rows,
    # identity weights pass them through, and t = 1 gives the target adjacency
    row = np.abs(np.random.default_rng(0).normal(size=8))
    tokens = np.broadcast_to(row, (3, 7, 8)).copy()
    p = p.replace(recon=np.broadcast_to(np.eye(8), p.recon.shape).copy(), recon_t=np.ones(6))
    assert multi_modal_recon_loss(tokens, p) == pytest.approx(0.0, abs=1e-20)


def test_recon_loss_symmetric_when_modalities_identical(tiny_params, rng):
    base = rng.normal(size=(7, 8))
    tokens = np.stack([base, base, base])
    # relabeling identical modalities swaps heads; use identical heads too
    p = tiny_params.replace(recon=np.broadcast_to(tiny_params.recon[:1], tiny_params.recon.shape).copy())
    p = p.replace(recon_t=np.full(6, 0.8))
    vals = [modality_recon_loss(tokens, p, m) for m in "RNT"]
    assert vals[0] == pytest.approx(vals[1], abs=1e-12) == pytest.approx(vals[2], abs=1e-12)
    assert multi_modal_recon_loss(np.zeros((3, 7, 8)), p) == pytest.approx(
        sum(modality_recon_loss(np.zeros((3, 7, 8)), p, m) for m in "RNT")
    )


def test_ce_examples():
    assert ce_loss(np.zeros(5), 2, smoothing=0.0) == pytest.approx(math.log(5), abs=1e-12)
    assert ce_loss(np.array([0.0, 60.0, 0.0]), 1, smoothing=0.0) < 1e-20
    logits = np.array([0.3, -1.2, 2.0])
    eps, C = 0.1, 3
    m = max(logits)
    lse = m + math.log(sum(math.exp(v - m) for v in logits))
    q = [eps / C + (1 - eps) * (i == 0) for i in range(C)]
    ref = -sum(q[i] * (logits[i] - lse) for i in range(C))
    assert ce_loss(logits, 0, smoothing=0.1) == pytest.approx(ref, abs=1e-12)


@given(st.integers(2, 6), st.integers(0, 2**31), st.floats(0, 0.5))
def test_ce_nonnegative(C, seed, eps):
    r = np.random.default_rng(seed)
    logits = 20 * r.normal(size=(3, C))
    assert float(ad.value(ce_loss(logits, r.integers(0, C, size=3), eps))) >= 0


def test_margin_examples():
    z = np.ones((4, 3))
    assert margin_loss(z, [0, 0, 1, 1], 0.3) == pytest.approx(0.3)
    far = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]])
    assert margin_loss(far, [0, 0, 1, 1], 0.3) == 0.0
    hand = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.5], [2.0, 2.0]])
    assert margin_loss(hand, [0, 0, 1, 1], 0.3) == pytest.approx(oracles.triplet(hand, [0, 0, 1, 1], 0.3), abs=1e-12)
    assert margin_loss(hand, [0, 0, 0, 0], 0.3) == 0.0


@given(st.integers(2, 8), st.integers(1, 3), st.integers(0, 2**31), st.floats(0.0, 2.0))
def test_margin_matches_exhaustive_oracle(n, d, seed, margin):
    r = np.random.default_rng(seed)
    z = r.normal(size=(n, d))
    labels = r.integers(0, 3, size=n)
    got = float(ad.value(margin_loss(z, labels, margin)))
    assert got >= 0
    assert got == pytest.approx(oracles.triplet(z, labels, margin), rel=0, abs=1e-12)


def _batch(rng, n_ids=3, per=2):
    return rng.normal(size=(n_ids * per, 3, 7, 8)), np.repeat(np.arange(n_ids), per)


def test_total_is_sum_of_parts(tiny_params, rng):
    tokens, labels = _batch(rng)
    cfg = TrainConfig(batch_size=6, identities_per_batch=3)
    total, rep = loss_terms(tiny_params, tokens, labels, cfg)
    assert float(ad.value(total)) == pytest.approx(rep.l_mr + rep.l_ce + rep.l_3m, abs=1e-12)
    assert rep.l_mr == pytest.approx(sum(rep.l_rec.values()), abs=1e-12)
    assert rep.l_mr == pytest.approx(sum(rep.l_f.values()) + sum(rep.l_s.values()), abs=1e-12)
    no_margin = dataclasses.replace(cfg, enable_margin=False)
    total2, rep2 = loss_terms(tiny_params, tokens, labels, no_margin)
    assert rep2.l_3m == 0.0
    assert float(ad.value(total2)) == pytest.approx(rep.l_mr + rep.l_ce, abs=1e-12)


def test_quadratic_head_gradient_closed_form(rng):
    x_in, target = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    W = ad.Tensor(rng.normal(size=(3, 3)))
    x_hat = ad.matmul(x_in, W)
    recon_feature_loss(x_hat, target).backward()
    np.testing.assert_allclose(W.grad, 2 * x_in.T @ (x_in @ W.data - target) / 4, atol=1e-12)
