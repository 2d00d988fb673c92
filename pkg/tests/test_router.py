import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from dge.errors import ConfigError, UsageError
from dge.gradcheck import numerical_grad, relative_error
from dge.rng import RngStream
from dge.router import (FeatureMap, GatingDecision, GranularitySet, gating_logits, partition, pool_queries,
                        select_inference, select_training, ste_scale, unpool_restore)
from dge.tensor import Tensor, reduce_sum, take_rows


def _map(values, h, w):
    return FeatureMap(Tensor(np.asarray(values, dtype=np.float64).reshape(h * w, -1)), h, w)


# ---- granularity set / partition ----

def test_region_size_defaults_to_largest_granularity():
    assert GranularitySet.build([1, 2, 4]).region_size == 4
    with pytest.raises(ConfigError, match="smaller than the largest"):
        partition(8, 8, 4, [1, 2, 4], 2)
    with pytest.raises(ConfigError):
        GranularitySet.build([2, 1])
    assert GranularitySet.build([0, 1]).skip_mode


def test_divisible_grid():
    part = partition(8, 8, 3, [1, 2, 4], 4)
    assert part.num_regions == 4
    assert part.patch_counts[2].tolist() == [1, 1, 1, 1]
    assert part.patch_counts[0].tolist() == [16, 16, 16, 16]


def test_padded_grid_corner_region():
    part = partition(7, 7, 1, [1, 2, 4], 4)
    assert part.num_regions == 4
    assert int(np.sum(part.token_region == 3)) == 9
    assert part.region_rect(3) == (4, 4, 7, 7)
    assert part.valid.shape == (8, 8) and int(part.valid.sum()) == 49
    # 3x3 valid corner at phi=2 touches 4 patches, all containing valid tokens
    assert part.patch_counts[1, 3] == 4


def test_layer_wise_region():
    part = partition(8, 8, 2, [1, 2, 4], 8)
    assert part.num_regions == 1
    assert partition(6, 8, 2, [1, 2, 4], 0).num_regions == 1


@given(st.integers(1, 11), st.integers(1, 11), st.sampled_from([[1], [1, 2], [1, 2, 4], [1, 3]]))
def test_partition_covers_every_token_once(h, w, phi):
    part = partition(h, w, 1, phi)
    for k in range(len(phi)):
        coords = [tuple(c) for region in part.patch_index_map(k) for patch in region for c in patch]
        assert len(coords) == h * w
        assert set(coords) == {(r, c) for r in range(h) for c in range(w)}
        assert sum(len(region) for region in part.patch_index_map(k)) == part.patch_counts[k].sum()


# ---- gating ----

def test_gating_logits_examples():
    part = partition(2, 2, 1, [1, 2], 2)
    z = _map([1, 2, 3, 4], 2, 2)
    logits = gating_logits(z, part, Tensor([[1.0, -1.0]]), Tensor([[0.0, 0.0]]))
    assert logits.data.tolist() == [[2.5, -2.5]]
    zero = gating_logits(z, part, Tensor(np.zeros((1, 2))), Tensor([[0.3, -0.1]]))
    assert np.allclose(zero.data, [[0.3, -0.1]])


def test_gating_region_mean_skips_padding():
    part = partition(3, 3, 1, [1, 2], 2)
    z = _map(np.arange(9), 3, 3)
    logits = gating_logits(z, part, Tensor([[1.0, 0.0]]), Tensor([[0.0, 0.0]]))
    # regions: [0,1,3,4] [2,5] [6,7] [8]
    assert logits.data[:, 0].tolist() == [2.0, 3.5, 6.5, 8.0]


def test_select_inference_examples():
    assert select_inference(Tensor([[0.1, 0.5, 0.2]])).tolist() == [1]
    assert select_inference(Tensor([[0.3, 0.3, 0.1]])).tolist() == [0]
    assert select_inference(Tensor([[4.2], [-1.0]])).tolist() == [0, 0]


@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=3), st.integers(-5000, 5000))
def test_argmax_invariant_to_constant_shift(logits, shift):
    x = np.array([logits], dtype=np.float64)
    assert select_inference(x).tolist() == select_inference(x + shift).tolist()


def test_select_training_examples(f64):
    d = select_training(Tensor([[0.7, 0.7, 0.7]]), None, noise=np.zeros((1, 3)))
    assert d.p.data[0] == pytest.approx(1 / 3)
    d = select_training(Tensor([[np.log(2.0), 0.0]]), None, noise=np.zeros((1, 2)))
    assert d.theta.tolist() == [0] and d.p.data[0] == pytest.approx(2 / 3)
    assert d.training and d.noise is not None


def test_select_training_rejects_bad_tau():
    with pytest.raises(ConfigError):
        select_training(Tensor([[0.0, 1.0]]), RngStream(0), tau=0.0)


def test_gumbel_max_frequencies_match_softmax():
    logits = np.tile([[1.0, 0.0]], (100_000, 1))
    d = select_training(Tensor(logits), RngStream(11, 2))
    counts = np.bincount(d.theta, minlength=2)
    expected = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum() * counts.sum()
    assert stats.chisquare(counts, expected).pvalue > 0.01
    assert counts[0] / counts.sum() == pytest.approx(0.731, abs=0.01)


def test_gumbel_max_law_three_way():
    logits = np.array([0.5, -0.2, 1.1])
    d = select_training(Tensor(np.tile(logits, (100_000, 1))), RngStream(5, 9))
    counts = np.bincount(d.theta, minlength=3)
    expected = np.exp(logits) / np.exp(logits).sum() * counts.sum()
    assert stats.chisquare(counts, expected).pvalue > 0.01


# ---- pooling / un-pooling ----

def test_identity_pooling():
    part = partition(4, 4, 2, [1, 2, 4])
    z = _map(np.random.default_rng(0).normal(size=(16, 2)), 4, 4)
    q = pool_queries(z, part, [0])
    assert q.num_queries == 16
    assert np.array_equal(np.sort(q.queries.data, axis=0), np.sort(z.spatial.data, axis=0))
    assert np.array_equal(unpool_restore(q.queries, q, part).spatial.data, z.spatial.data)


def test_patch_mean_and_padded_mean():
    part = partition(2, 2, 1, [1, 2])
    q = pool_queries(_map([1, 2, 3, 4], 2, 2), part, [1])
    assert q.queries.data.tolist() == [[2.5]]
    padded = partition(2, 1, 1, [1, 2])
    q = pool_queries(_map([1, 3], 2, 1), padded, [1])
    assert q.queries.data.tolist() == [[2.0]] and q.query_area.tolist() == [2]


def test_query_order_is_region_major_then_patch_row_major():
    part = partition(4, 4, 1, [1, 2], 2)
    z = _map(np.arange(16), 4, 4)
    q = pool_queries(z, part, [1, 0, 0, 1])
    assert q.query_region.tolist() == [0, 1, 1, 1, 1, 2, 2, 2, 2, 3]
    assert q.queries.data[:, 0].tolist() == [2.5, 2, 3, 6, 7, 8, 9, 12, 13, 12.5]
    assert q.region_counts.tolist() == [1, 4, 4, 1]


@given(st.integers(1, 9), st.integers(1, 9), st.floats(-5, 5), st.integers(0, 10_000))
def test_constant_field_is_a_pooling_fixed_point(h, w, c, seed):
    part = partition(h, w, 2, [1, 2, 4])
    theta = np.random.default_rng(seed).integers(0, 3, part.num_regions)
    z = FeatureMap(Tensor(np.full((h * w, 2), c)), h, w)
    q = pool_queries(z, part, theta)
    assert np.allclose(unpool_restore(q.queries, q, part).spatial.data, c)


def test_unpool_gradient_is_patch_area(f64):
    part = partition(3, 3, 1, [1, 2])
    q = pool_queries(_map(np.arange(9), 3, 3), part, [1, 1, 1, 1])
    y_hat = Tensor(np.random.default_rng(1).normal(size=(q.num_queries, 2)), requires_grad=True)
    reduce_sum(unpool_restore(y_hat, q, part).spatial).backward()
    assert y_hat.grad[:, 0].tolist() == q.query_area.tolist() == [4, 2, 2, 1]


def test_skip_mode_region_emits_no_queries():
    part = partition(4, 4, 1, [0, 1], 2)
    q = pool_queries(_map(np.arange(16), 4, 4), part, [0, 1, 0, 0])
    assert q.num_queries == 4 and q.region_counts.tolist() == [0, 4, 0, 0]
    q = pool_queries(_map(np.arange(16), 4, 4), part, np.zeros(4, dtype=int))
    assert q.num_queries == 0
    out = unpool_restore(Tensor(np.zeros((0, 1))), q, part)
    assert np.array_equal(out.spatial.data, np.zeros((16, 1)))


def test_pool_rejects_bad_theta():
    part = partition(4, 4, 1, [1, 2])
    with pytest.raises(UsageError):
        pool_queries(_map(np.arange(16), 4, 4), part, [5, 0, 0, 0])


# ---- straight-through scale ----

def test_ste_forward_is_identity_and_inference_rejects():
    logits = Tensor([[0.2, 0.1]], requires_grad=True)
    d = select_training(logits, None, noise=np.zeros((1, 2)))
    y = Tensor(np.ones((3, 2)), requires_grad=True)
    out = ste_scale(y, d, np.zeros(3, dtype=int))
    assert out.data is y.data
    with pytest.raises(UsageError):
        ste_scale(y, GatingDecision(logits=logits, theta=np.array([0])), np.zeros(3, dtype=int))


def test_ste_saturated_score_is_plain_identity(f64):
    logits = Tensor([[60.0, 0.0]], requires_grad=True)
    d = select_training(logits, None, noise=np.zeros((1, 2)))
    assert d.p.data[0] == 1.0
    y = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
    w = np.random.default_rng(1).normal(size=(2, 3))
    (ste_scale(y, d, np.zeros(2, dtype=int)) * w).sum().backward()
    assert np.array_equal(y.grad, w)


def test_ste_logit_gradient_matches_surrogate(f64):
    rng = np.random.default_rng(4)
    logits = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    noise = rng.gumbel(size=(3, 3))
    y_hat = Tensor(rng.normal(size=(5, 2)))
    region = np.array([0, 0, 1, 2, 2])
    w = rng.normal(size=(5, 2))

    def loss():
        d = select_training(logits, None, tau=0.7, noise=noise)
        return (ste_scale(y_hat, d, region) * w).sum()

    def surrogate():
        d = select_training(logits, None, tau=0.7, noise=noise)
        return (take_rows(d.p.reshape(3, 1), region) * y_hat * w).sum()

    logits.zero_grad()
    loss().backward()
    analytic = logits.grad.copy()
    assert relative_error(analytic, numerical_grad(surrogate, logits)) < 1e-4


def test_decision_json_export():
    part = partition(8, 8, 2, [1, 2, 4])
    d = GatingDecision(logits=Tensor(np.zeros((4, 3))), theta=np.array([0, 1, 2, 2]))
    doc = json.loads(json.dumps(d.to_dict(part, layer=1)))
    assert doc["granularity"] == [1, 2, 4, 4]
    assert doc["regions"][3] == {"index": 3, "top": 4, "left": 4, "bottom": 8, "right": 8}
    assert doc["p"] is None and len(doc["logits"]) == 4
