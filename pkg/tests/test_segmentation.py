from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmsysid.core import segments_from_values
from mmsysid.segmentation import (
    LN10,
    GroupingLoss,
    build_neighbourhood,
    grouping_loss,
    knn_neighbourhoods,
    oversegment,
    similarity_loss,
    similarity_weights,
    variance_loss,
)


def _clusters(sizes, dim=16, noise=0.02, seed=0):
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(len(sizes), dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    labels = np.concatenate([np.full(n, k) for k, n in enumerate(sizes)])
    return centres[labels] + noise * rng.normal(size=(len(labels), dim)), labels


def _pure(seg, truth):
    return all(len(np.unique(truth[seg == s])) == 1 for s in np.unique(seg))


@pytest.mark.parametrize("target", [2, 3, 8])
def test_oversegment_separates_clusters(target):
    z, truth = _clusters([120, 80, 100])
    seg = oversegment(z, target_granularity=target)
    assert len(np.unique(seg)) == 3
    assert _pure(seg, truth)


def test_oversegment_noiseless_two_parts():
    z, truth = _clusters([50, 50], noise=0.0)
    seg = oversegment(z, target_granularity=8)
    assert len(np.unique(seg)) == 2 and _pure(seg, truth)


def test_oversegment_identical_features_single_segment():
    with pytest.warns(RuntimeWarning):
        seg = oversegment(np.ones((20, 4)))
    assert not seg.any()


def test_oversegment_labels_contiguous_by_first_particle():
    z, _ = _clusters([30, 30, 30], seed=4)
    perm = np.random.default_rng(1).permutation(90)
    seg = oversegment(z[perm], target_granularity=3)
    first = [np.flatnonzero(seg == s)[0] for s in range(seg.max() + 1)]
    assert first == sorted(first) and seg[0] == 0


def test_oversegment_large_n_sparse_path_matches_dense():
    z, truth = _clusters([3500, 3000], dim=8, noise=0.01)
    seg = oversegment(z, target_granularity=2)
    assert len(np.unique(seg)) == 2 and _pure(seg, truth)


def test_knn_excludes_self_and_weights_normalised():
    z, _ = _clusters([40, 40])
    nbr = knn_neighbourhoods(z, 20)
    assert nbr.shape == (80, 20)
    assert not np.any(nbr == np.arange(80)[:, None])
    w = similarity_weights(z, nbr)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)


def test_similarity_weight_formula():
    z = np.array([[0.0], [0.1], [0.3]])
    nbr = np.array([[1, 2], [0, 2], [1, 0]])
    w = similarity_weights(z, nbr, alpha=20.0, eps=1e-9)
    raw = np.exp(-20.0 * np.array([0.01, 0.09])) + 1e-9
    np.testing.assert_allclose(w[0], raw / raw.sum())


def _loss_setup(seed=0, n_seg=3):
    z, truth = _clusters([60, 50, 40], seed=seed)
    labels = truth % n_seg
    nbhd = build_neighbourhood(z)
    return labels, nbhd


def test_aggregated_losses_match_per_particle_forms():
    labels, nbhd = _loss_setup()
    params = np.array([[4.0, 2.5], [6.0, 2.9], [4.2, 2.4]])
    g = GroupingLoss(labels, nbhd, 3, w_v=1.0)
    assert g.similarity(params) == pytest.approx(similarity_loss(labels, params, nbhd), rel=1e-12)
    assert g.variance(params) == pytest.approx(variance_loss(labels, params), rel=1e-12)
    assert g.value(params) == pytest.approx(grouping_loss(g.similarity(params), g.variance(params), 1.0))


def test_losses_zero_for_uniform_parameters():
    labels, nbhd = _loss_setup()
    g = GroupingLoss(labels, nbhd, 3)
    p = np.tile([5.0, 2.7], (3, 1))
    assert g.value(p) == pytest.approx(0.0, abs=1e-20)
    np.testing.assert_allclose(g.gradient(p), 0.0, atol=1e-15)


def test_variance_uses_natural_log():
    labels = np.array([0, 1])
    params = np.array([[4.0, 2.0], [6.0, 2.0]])
    assert variance_loss(labels, params) == pytest.approx((LN10 * 1.0) ** 2)


def test_losses_accept_segments():
    labels, nbhd = _loss_setup()
    segs = segments_from_values([1e4, 1e6, 2e4], [300, 800, 250])
    g = GroupingLoss(labels, nbhd, 3)
    arr = np.array([[s.log10_E, s.log10_rho] for s in segs])
    assert g.value(segs) == g.value(arr)


# subnormal weights underflow the loss, so FD sees only rounding
@given(st.integers(0, 1000), st.one_of(st.just(0.0), st.floats(1e-3, 3.0)))
def test_grouping_gradient_matches_finite_differences(seed, w_v):
    labels, nbhd = _loss_setup(seed % 5)
    g = GroupingLoss(labels, nbhd, 3, w_v)
    p = np.random.default_rng(seed).uniform([3, 2], [7, 3.5], size=(3, 2))
    analytic = g.gradient(p)
    h = 1e-5
    fd = np.zeros_like(p)
    for idx in np.ndindex(*p.shape):
        a = p.copy()
        a[idx] += h
        b = p.copy()
        b[idx] -= h
        fd[idx] = (g.value(a) - g.value(b)) / (2 * h)
    np.testing.assert_allclose(analytic, fd, rtol=1e-6, atol=1e-9 * np.abs(analytic).max())


@given(st.integers(0, 1000), st.floats(-2, 2))
def test_grouping_loss_invariant_to_common_shift(seed, shift):
    labels, nbhd = _loss_setup(seed % 3)
    g = GroupingLoss(labels, nbhd, 3)
    p = np.random.default_rng(seed).uniform(2, 6, size=(3, 2))
    assert g.value(p + shift) == pytest.approx(g.value(p), rel=1e-9, abs=1e-12)
