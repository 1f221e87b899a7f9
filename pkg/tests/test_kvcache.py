import json
import math

import numpy as np
import pytest

from flowcache_sim import (CompressionConfig, KVBuffer, combined_score,
                           granularity_aggregate, importance,
                           pooled_importance, redundancy_fast,
                           redundancy_naive, select_tokens)
from flowcache_sim.errors import DegenerateInput, InvalidConfig, InvalidInput


def cfg(**kw):
    return CompressionConfig(**kw)


def importance_oracle(queries, keys, window):
    """Three-loop attention oracle with explicit head grouping."""
    l_q, h_q, d = queries.shape
    l_k, h_k, _ = keys.shape
    group = h_q // h_k
    rows = queries[-min(window, l_q):]
    out = np.zeros((h_k, l_k))
    for h in range(h_k):
        count = 0
        for q_row in rows:
            for g in range(group):
                q = q_row[h * group + g]
                logits = np.array([q @ keys[j, h] / math.sqrt(d)
                                   for j in range(l_k)])
                e = np.exp(logits - logits.max())
                out[h] += e / e.sum()
                count += 1
        out[h] /= count
    return out


class TestImportance:
    def test_identical_keys_uniform(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(1, 2, 4))
        keys = np.repeat(rng.normal(size=(1, 2, 4)), 6, axis=0)
        out = importance(q, keys, cfg())
        np.testing.assert_allclose(out, 1.0 / 6.0, atol=1e-12)

    def test_three_loop_oracle(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=(8, 4, 4))
        keys = rng.normal(size=(16, 2, 4))
        out = importance(q, keys, cfg(query_window=50))
        np.testing.assert_allclose(out, importance_oracle(q, keys, 50),
                                   atol=1e-10)

    def test_trailing_window_only(self):
        rng = np.random.default_rng(2)
        q = rng.normal(size=(10, 2, 4))
        keys = rng.normal(size=(5, 2, 4))
        windowed = importance(q, keys, cfg(query_window=3))
        np.testing.assert_allclose(windowed,
                                   importance_oracle(q, keys, 3), atol=1e-10)
        full = importance(q, keys, cfg(query_window=50))
        assert not np.allclose(windowed, full)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            q = rng.normal(size=(rng.integers(1, 9), 4, 8))
            keys = rng.normal(size=(rng.integers(2, 33), 2, 8))
            out = importance(q, keys, cfg())
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    def test_head_divisibility(self):
        with pytest.raises(InvalidInput):
            importance(np.zeros((2, 3, 4)), np.zeros((5, 2, 4)), cfg())


class TestPooledImportance:
    def test_kernel_one_identity(self):
        imp = np.random.default_rng(4).random((2, 9))
        np.testing.assert_array_equal(pooled_importance(imp, cfg(pool_kernel=1)),
                                      imp)

    def test_impulse_plateau(self):
        imp = np.zeros((1, 9))
        imp[0, 4] = 1.0
        out = pooled_importance(imp, cfg(pool_kernel=5))
        np.testing.assert_array_equal(out[0], [0, 0, 1, 1, 1, 1, 1, 0, 0])

    def test_window_scan_oracle(self):
        imp = np.random.default_rng(5).random((3, 32))
        out = pooled_importance(imp, cfg(pool_kernel=5))
        for h in range(3):
            for j in range(32):
                lo, hi = max(0, j - 2), min(32, j + 3)
                assert out[h, j] == imp[h, lo:hi].max()


class TestRedundancy:
    def test_identical_keys_uniform(self):
        keys = np.repeat(np.random.default_rng(6).normal(size=(1, 2, 8)),
                         5, axis=0)
        for fn in (redundancy_naive, redundancy_fast):
            np.testing.assert_allclose(fn(keys), 0.2, atol=1e-12)

    def test_orthogonal_pair_uniform(self):
        keys = np.zeros((2, 1, 2))
        keys[0, 0] = [1.0, 0.0]
        keys[1, 0] = [0.0, 1.0]
        np.testing.assert_allclose(redundancy_naive(keys), 0.5, atol=1e-15)

    def test_pairwise_loop_oracle(self):
        rng = np.random.default_rng(7)
        keys = rng.normal(size=(64, 1, 8))
        unit = keys[:, 0, :] / np.linalg.norm(keys[:, 0, :], axis=1,
                                              keepdims=True)
        col = np.zeros(64)
        for j in range(64):
            for i in range(64):
                if i != j:
                    col[j] += unit[i] @ unit[j]
        col /= 64
        e = np.exp(col - col.max())
        np.testing.assert_allclose(redundancy_naive(keys)[0], e / e.sum(),
                                   atol=1e-10)

    def test_fast_matches_naive(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            keys = rng.normal(size=(int(rng.integers(2, 200)),
                                    int(rng.integers(1, 5)),
                                    int(rng.integers(2, 32))))
            diff = np.abs(redundancy_fast(keys) - redundancy_naive(keys)).max()
            assert diff < 1e-9

    def test_zero_norm_row_rejected(self):
        keys = np.random.default_rng(9).normal(size=(4, 1, 3))
        keys[2, 0] = 0.0
        for fn in (redundancy_naive, redundancy_fast):
            with pytest.raises(DegenerateInput):
                fn(keys)

    def test_too_few_tokens(self):
        with pytest.raises(InvalidInput):
            redundancy_naive(np.ones((1, 1, 3)))


class TestCombinedScore:
    def test_lambda_one_ranks_like_importance(self):
        rng = np.random.default_rng(10)
        pooled, red = rng.random((2, 12)), rng.random((2, 12))
        out = combined_score(pooled, red, 1.0)
        np.testing.assert_array_equal(np.argsort(out), np.argsort(pooled))

    def test_lambda_zero_ranks_like_low_redundancy(self):
        rng = np.random.default_rng(11)
        pooled, red = rng.random((2, 12)), rng.random((2, 12))
        out = combined_score(pooled, red, 0.0)
        np.testing.assert_array_equal(np.argsort(out), np.argsort(-red))

    def test_ranking_scale_invariance(self):
        rng = np.random.default_rng(12)
        pooled, red = rng.random((1, 20)), rng.random((1, 20))
        a = combined_score(pooled, red, 0.07)
        b = combined_score(3.5 * pooled, 3.5 * red, 0.07)
        np.testing.assert_array_equal(np.argsort(a), np.argsort(b))

    def test_lambda_out_of_range(self):
        with pytest.raises(InvalidInput):
            combined_score(np.zeros((1, 2)), np.zeros((1, 2)), 1.5)


class TestSelection:
    def test_argmax_pair(self):
        scores = np.array([0.4, 0.1, 0.3, 0.2])
        keep = select_tokens(scores, 2, "token", 1, 4)
        assert list(keep) == [0, 2]

    def test_frame_group_selection(self):
        # 2 frames of 3 tokens; frame scores [0.6, 0.4]; budget of one frame
        scores = np.array([0.6, 0.6, 0.6, 0.4, 0.4, 0.4])
        keep = select_tokens(scores, 3, "frame", 3, 6)
        assert list(keep) == [0, 1, 2]

    def test_frame_size_one_equals_token(self):
        scores = np.random.default_rng(13).random(12)
        np.testing.assert_array_equal(
            select_tokens(scores, 5, "frame", 1, 12),
            select_tokens(scores, 5, "token", 1, 12))

    def test_group_loop_oracle(self):
        rng = np.random.default_rng(14)
        scores = rng.random(24)
        group = 4
        keep = select_tokens(scores, 8, "frame", group, 24)
        means = scores.reshape(-1, group).mean(axis=1)
        best = sorted(sorted(range(6), key=lambda g: (-means[g], g))[:2])
        expected = [g * group + k for g in best for k in range(group)]
        assert list(keep) == expected

    def test_aggregate_divisibility(self):
        with pytest.raises(InvalidConfig):
            granularity_aggregate(np.zeros(10), 3)


def make_chunk_kv(rng, tokens, heads, dim):
    keys = rng.normal(size=(tokens, heads, dim))
    values = rng.normal(size=(tokens, heads, dim))
    return keys, values


class TestBuffer:
    def setup_method(self):
        self.rng = np.random.default_rng(15)
        self.tokens = 12
        self.buffer = KVBuffer(key_heads=2, head_dim=4, tokens_per_chunk=12,
                               budget_tokens=24, active_capacity=24,
                               frame_tokens=4)
        self.queries = self.rng.normal(size=(10, 4, 4))

    def feed(self, chunk_index):
        keys, values = make_chunk_kv(self.rng, self.tokens, 2, 4)
        return self.buffer.add_clean_chunk(chunk_index, keys, values,
                                           self.queries, cfg(), chunk_index)

    def test_fill_phase_appends(self):
        assert self.feed(1) is None
        assert self.feed(2) is None
        assert self.buffer.clean_tokens == 24

    def test_compression_triggers_at_budget(self):
        self.feed(1)
        self.feed(2)
        report = self.feed(3)
        assert report is not None and not report.no_op
        assert self.buffer.clean_tokens == 24
        assert report.candidate_tokens == 36
        for head in report.heads.values():
            assert head.evicted_count == 12

    def test_retained_ids_sorted_subset(self):
        self.feed(1)
        self.feed(2)
        report = self.feed(3)
        universe = set(range(36))
        for h in range(2):
            ids = list(self.buffer.retained_ids(h))
            assert ids == sorted(ids)
            assert set(ids) <= universe
            assert len(ids) == 24

    def test_heads_can_differ(self):
        self.feed(1)
        self.feed(2)
        self.feed(3)
        a = list(self.buffer.retained_ids(0))
        b = list(self.buffer.retained_ids(1))
        assert a != b   # per-head selection is independent

    def test_capacity_invariant_with_active_chunks(self):
        self.buffer.activate_chunk(1)
        self.buffer.activate_chunk(2)
        assert self.buffer.active_tokens == 24
        self.buffer.retire_chunk(1)
        self.feed(1)
        assert self.buffer.resident_tokens <= self.buffer.total_capacity

    def test_under_budget_compress_is_noop(self):
        # force the compression path with fewer candidates than the budget
        buffer = KVBuffer(key_heads=1, head_dim=4, tokens_per_chunk=4,
                          budget_tokens=16, active_capacity=8)
        keys, values = make_chunk_kv(self.rng, 4, 1, 4)
        report = buffer._compress(1, keys, values, np.arange(4),
                                  self.rng.normal(size=(5, 1, 4)), cfg(), 0)
        assert report.no_op
        assert report.heads[0].evicted_count == 0
        assert report.heads[0].score_min is None

    def test_report_round_trips_json(self):
        self.feed(1)
        self.feed(2)
        report = self.feed(3)
        payload = json.dumps(report.to_dict())
        back = json.loads(payload)
        assert back["heads"]["0"]["retained_ids"] == [
            int(i) for i in self.buffer.retained_ids(0)]
        assert back["no_op"] is False

    def test_no_budget_grows_unbounded(self):
        buffer = KVBuffer(key_heads=1, head_dim=4, tokens_per_chunk=6,
                          budget_tokens=None, active_capacity=6)
        for i in range(1, 6):
            keys, values = make_chunk_kv(self.rng, 6, 1, 4)
            assert buffer.add_clean_chunk(i, keys, values, self.queries[:, :1],
                                          cfg(), i) is None
        assert buffer.clean_tokens == 30
