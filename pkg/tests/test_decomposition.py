import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from xdomainmix import decomposition as dec
from xdomainmix import models

masks_st = hnp.arrays(np.float64, (4, 6), elements=st.sampled_from([0.0, 1.0]))
feats_st = hnp.arrays(np.float64, (4, 6), elements=st.floats(-1e6, 1e6, allow_nan=False))


@pytest.mark.parametrize("q,k,rank", [(0.5, 32, 16), (0.9, 32, 29), (0.7000000000000001, 10, 7),
                                      (0.6, 32, 20), (1.0, 8, 8), (1e-6, 8, 1)])
def test_nearest_rank_positions(q, k, rank):
    assert dec.nearest_rank(q, k) == rank


def test_nearest_rank_rejects_bad_levels():
    for q in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            dec.nearest_rank(q, 4)


@given(feats_st, masks_st, masks_st)
def test_components_sum_to_features_and_stay_disjoint(z, m_c, m_d):
    parts = dec.decompose(z, m_c, m_d)
    np.testing.assert_array_equal(parts.total(), z)
    support = [(p != 0) for p in (parts.z_cd, parts.z_cnd, parts.z_ncd, parts.z_ncnd)]
    assert np.all(sum(s.astype(int) for s in support) <= 1)


def test_component_masks_partition_positions(rng):
    m_c = (rng.random((5, 7)) < 0.5).astype(float)
    m_d = (rng.random((5, 7)) < 0.5).astype(float)
    sel = dec.component_masks(m_c, m_d)
    np.testing.assert_array_equal(sum(sel.values()), np.ones((5, 7)))


def test_decompose_rejects_non_binary_masks():
    z = np.ones((2, 2))
    with pytest.raises(ValueError):
        dec.decompose(z, np.full((2, 2), 0.5), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        dec.decompose(z, np.zeros((2, 3)), np.zeros((2, 2)))


@given(st.integers(2, 40), st.floats(0.05, 1.0))
def test_mask_cardinality_for_distinct_scores(k, q):
    scores = np.random.default_rng(k).permutation(k)[None, :].astype(float)
    masks, _ = dec.build_masks(scores, q)
    assert int(masks.sum()) == k - max(1, math.ceil(q * k - 1e-9))


def test_ties_fall_into_generic_component():
    scores = np.array([[1.0, 1.0, 1.0, 1.0]])
    masks, thr = dec.build_masks(scores, 0.5)
    assert thr[0] == 1.0
    assert masks.sum() == 0


def test_q_one_selects_nothing():
    masks, _ = dec.build_masks(np.random.default_rng(0).standard_normal((3, 5)), 1.0)
    assert masks.sum() == 0


def test_importance_is_gradient_times_value():
    z = np.array([[1.0, -2.0, 3.0]])
    g = np.array([[0.5, 0.5, -1.0]])
    np.testing.assert_array_equal(dec.class_importance(z, g), [[0.5, -1.0, -3.0]])
    np.testing.assert_array_equal(dec.domain_importance(z, g), [[0.5, -1.0, -3.0]])
    with pytest.raises(ValueError):
        dec.class_importance(z, g[:, :2])


def test_per_sample_quantile():
    assert dec.per_sample_quantile([4.0, 1.0, 3.0, 2.0], 0.5) == 2.0
    assert dec.per_sample_quantile([4.0, 1.0, 3.0, 2.0], 0.9) == 4.0


def test_score_features_linear_heads_give_weight_columns():
    arch = models.ArchConfig(2, 3, 2, feature_dim=4, extractor_hidden=(3,), head_hidden=())
    params = models.init(arch, np.random.default_rng(0))
    z = np.random.default_rng(1).standard_normal((5, 4))
    y = np.array([0, 1, 2, 0, 1])
    d = np.array([0, 1, 0, 1, 1])
    s = dec.score_features(params, z, y, d)
    w_c = params.class_head[0][0]
    w_d = params.domain_head[0][0]
    np.testing.assert_array_equal(s.class_grads, w_c[:, y].T)
    np.testing.assert_array_equal(s.domain_grads, w_d[:, d].T)
    np.testing.assert_array_equal(s.class_scores, w_c[:, y].T * z)
