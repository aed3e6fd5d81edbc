import math

import numpy as np
import pytest
from scipy.stats import chisquare

import tensor_autodiff as ad
from errors import ClassWeightFallbackWarning, DomainError, EmptyBatchWarning, ShapeError
from graph_core import SnapshotGraph
from heads_metrics import (
    auc, init_nc_readout, last_edge_features, link_scores, margin_loss, mrr, mrr_from_scores, nc_readout,
    positive_weight, reciprocal_ranks, sample_negatives, score_edges, weighted_bce,
)
from verification import gradient_check

Z_SMALL = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])


def test_dot_product_scores():
    assert score_edges(Z_SMALL, [(0, 2), (1, 2), (0, 1)]).tolist() == [1.0, 1.0, 0.0]
    assert link_scores(Z_SMALL, [(2, 2)])[0].score == 2.0
    with pytest.raises(DomainError):
        score_edges(Z_SMALL, [(0, 3)])


def test_margin_loss_by_hand():
    # (0,2) vs tail 1: max(0, 1 - 1 + 0) = 0 ; (0,1) vs tail 2: max(0, 1 - 0 + 1) = 2
    loss = margin_loss(Z_SMALL, [(0, 2), (0, 1)], [1, 2])
    assert loss.values[0, 0] == pytest.approx(1.0)


def test_margin_loss_empty_batch_warns():
    with pytest.warns(EmptyBatchWarning):
        loss = margin_loss(Z_SMALL, [], [])
    assert loss.values[0, 0] == 0.0
    with pytest.raises(ShapeError):
        margin_loss(Z_SMALL, [(0, 1)], [1, 2])


def test_negative_samples_avoid_true_tail(rng):
    pos = np.stack([np.zeros(200, dtype=int), np.arange(200) % 50], axis=1)
    neg = sample_negatives(pos, 50, 7, rng)
    assert neg.shape == (200, 7)
    assert neg.min() >= 0 and neg.max() < 50
    assert np.all(neg != pos[:, 1][:, None])


def test_negative_samples_are_uniform(rng):
    pos = np.stack([np.zeros(1000, dtype=int), np.arange(1000) % 10], axis=1)
    neg = sample_negatives(pos, 10, 20, rng)
    counts = np.bincount(neg.ravel(), minlength=10)
    assert chisquare(counts).pvalue > 1e-3


def test_negative_sampling_domain(rng):
    with pytest.raises(DomainError):
        sample_negatives([(0, 0)], 1, 1, rng)
    with pytest.raises(DomainError):
        sample_negatives([(0, 1)], 5, 0, rng)


def test_reciprocal_rank_uses_midrank_for_ties():
    # one negative above, one tied: rank 2.5
    assert reciprocal_ranks(np.array([1.0]), np.array([[2.0, 1.0, 0.0]]))[0] == pytest.approx(0.4)
    assert mrr_from_scores([3.0, 0.0], [[1.0, 2.0], [1.0, 2.0]]) == pytest.approx((1.0 + 1.0 / 3.0) / 2)
    assert mrr_from_scores([], []) is None


def test_mrr_compares_each_positive_with_its_own_negatives():
    pos = [(0, 0), (0, 1)]
    neg = [[1, 1], [0, 2]]
    # s(0,0)=1 vs [0, 0] -> 1 ; s(0,1)=0 vs [1, 1] -> 1/3
    assert mrr(Z_SMALL, pos, neg) == pytest.approx((1.0 + 1.0 / 3.0) / 2)
    assert mrr(Z_SMALL, [], np.zeros((0, 3))) is None


def test_mrr_matches_score_based_reference(rng):
    z = rng.normal(size=(30, 4))
    pos = rng.integers(0, 30, size=(25, 2))
    neg = sample_negatives(pos, 30, 9, rng)
    s_pos = score_edges(z, pos)
    s_neg = np.einsum("ed,ekd->ek", z[pos[:, 0]], z[neg])
    assert mrr(z, pos, neg) == pytest.approx(mrr_from_scores(s_pos, s_neg))


def test_auc_reference_values():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auc([0.5, 0.5, 0.5], [0, 1, 1]) == 0.5
    assert auc([0.1, 0.2], [1, 1]) is None


def test_auc_matches_pairwise_count(rng):
    s = rng.integers(0, 5, size=60).astype(float)
    y = rng.integers(0, 2, size=60)
    pos, neg = s[y == 1], s[y == 0]
    brute = ((pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()) / (pos.size * neg.size)
    assert auc(s, y) == pytest.approx(brute)


def test_weighted_bce_values():
    zeros = np.zeros((4, 1))
    assert weighted_bce(zeros, [1, 0, 0, 0], "none").values[0, 0] == pytest.approx(math.log(2))
    # w+ = 3: (3 log 2 + 3 log 2) / 4
    assert weighted_bce(zeros, [1, 0, 0, 0], "balanced").values[0, 0] == pytest.approx(1.5 * math.log(2))
    assert positive_weight([1, 0, 0, 0], "sqrt") == pytest.approx(math.sqrt(3))


def test_weighted_bce_single_class_falls_back():
    with pytest.warns(ClassWeightFallbackWarning):
        assert positive_weight([1, 1, 1], "balanced") == 1.0
    with pytest.raises(DomainError):
        weighted_bce(np.zeros((2, 1)), [0, 2])
    with pytest.raises(DomainError):
        positive_weight([0, 1], "focal")


def test_weighted_bce_gradient(rng):
    labels = np.array([1, 0, 0, 1, 0])
    errors = gradient_check(lambda v: weighted_bce(v["x"], labels, "sqrt"), {"x": rng.normal(size=(5, 1))})
    assert errors["x"] <= 1e-6


def test_last_edge_features_prefers_latest_then_last_row():
    g = SnapshotGraph.from_edges(
        3, [(0, 1), (0, 2), (1, 2)],
        edge_features=np.array([[1.0], [2.0], [3.0]]),
        edge_timestamps=np.array([5.0, 5.0, 3.0]),
    )
    assert last_edge_features(g, [0, 1, 2], 1)[:, 0].tolist() == [2.0, 3.0, 0.0]


def test_nc_readout_shapes(rng):
    params = init_nc_readout(rng, 4, 2)
    Z = rng.normal(size=(6, 4))
    out = nc_readout(params, Z, [0, 3, 5], rng.normal(size=(3, 2)))
    assert out.shape == (3, 1)
    with pytest.raises(ShapeError):
        nc_readout(params, Z, [0, 3], rng.normal(size=(2, 3)))
    assert ad.as_array(params.fusion).tolist() == [[1.0]]


def test_mrr_rejects_uneven_negative_tails():
    with pytest.raises(ShapeError):
        mrr(Z_SMALL, [(0, 0), (0, 1)], [1, 2, 0])
    with pytest.raises(ShapeError):
        mrr_from_scores([1.0, 2.0], [0.5, 0.1, 0.3])


def test_mrr_invariant_under_increasing_transforms(rng):
    s_pos = rng.normal(size=40)
    s_neg = rng.normal(size=(40, 15))
    base = mrr_from_scores(s_pos, s_neg)
    assert mrr_from_scores(np.exp(s_pos), np.exp(s_neg)) == base
    assert mrr_from_scores(2.5 * s_pos + 3.0, 2.5 * s_neg + 3.0) == base
    z = rng.normal(size=(20, 3))
    pos = rng.integers(0, 20, size=(10, 2))
    neg = sample_negatives(pos, 20, 6, rng)
    assert mrr(3.0 * z, pos, neg) == pytest.approx(mrr(z, pos, neg))
