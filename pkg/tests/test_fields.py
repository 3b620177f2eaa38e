"""Tests for app.fields: velocity backends, sparse paths and the KV cache."""

from __future__ import annotations

import math

import numpy as np
import pytest

from app.core import CacheStateError, LatentChunk, NoiseSchedule
from app.fields import (
    ChunkTargets,
    ContextChunk,
    KVCacheState,
    LinearField,
    RectifiedOracleField,
    ToyAttentionField,
    finalize_chunk_kv,
)

SHAPE = (2, 3, 3, 4)


def _latent(seed: int, shape: tuple[int, ...] = SHAPE) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=shape)


def _field(**kwargs) -> ToyAttentionField:
    return ToyAttentionField(SHAPE[-1], NoiseSchedule(10), seed=3, **kwargs)


def _dense_reference(
    field: ToyAttentionField,
    x: np.ndarray,
    t: int,
    chunk_index: int,
    earlier: list[np.ndarray],
    earlier_t: int = 0,
) -> np.ndarray:
    """Token-by-token attention over every key, written out with plain loops."""
    f_dim, h_dim, w_dim, c = x.shape
    emb = field.time_embedding(t)
    keys, values, places = [], [], []
    for j, latent in enumerate(earlier):
        for g in range(f_dim):
            for kh in range(h_dim):
                for kw in range(w_dim):
                    zk = latent[g, kh, kw] + field.time_embedding(earlier_t)
                    keys.append(zk @ field.w_k)
                    values.append(zk @ field.w_v)
                    places.append((j * f_dim + g, kh, kw))
    for g in range(f_dim):
        for kh in range(h_dim):
            for kw in range(w_dim):
                zk = x[g, kh, kw] + emb
                keys.append(zk @ field.w_k)
                values.append(zk @ field.w_v)
                places.append((chunk_index * f_dim + g, kh, kw))
    out = np.empty_like(x)
    for f in range(f_dim):
        for h in range(h_dim):
            for w in range(w_dim):
                z = x[f, h, w] + emb
                q = z @ field.w_q
                own = chunk_index * f_dim + f
                scores = np.array(
                    [
                        q @ k / math.sqrt(c)
                        - field.temporal_decay * abs(own - g)
                        - field.spatial_decay * ((h - kh) ** 2 + (w - kw) ** 2)
                        for k, (g, kh, kw) in zip(keys, places)
                    ]
                )
                weights = np.exp(scores - scores.max())
                weights /= weights.sum()
                attended = sum(wt * v for wt, v in zip(weights, values))
                hidden = np.tanh((attended - z @ field.w_v) @ field.w_1)
                gate = 1.0
                for g in (f - 1, f + 1):
                    if 0 <= g < f_dim:
                        step = np.linalg.norm(x[f, h, w] - x[g, h, w])
                        gate *= math.tanh(float(step))
                out[f, h, w] = x[f, h, w] + field.gain * gate * hidden @ field.w_2
    return out


# ── pointwise fields ───────────────────────────────────────────────── #


class TestPointwiseFields:
    def test_oracle_equal_endpoints_gives_zero(self):
        data = _latent(0)
        field = RectifiedOracleField({0: ChunkTargets(data, data.copy())})
        v = field.eval_full(LatentChunk(0, _latent(1), 5), 5)
        assert np.array_equal(v, np.zeros(SHAPE))

    def test_oracle_is_noise_minus_data(self):
        data, noise = _latent(0), _latent(1)
        field = RectifiedOracleField({0: ChunkTargets(data, noise)})
        v = field.eval_full(LatentChunk(0, _latent(2), 5), 5)
        assert np.array_equal(v, noise - data)

    def test_oracle_missing_targets(self):
        field = RectifiedOracleField({})
        with pytest.raises(ValueError):
            field.eval_full(LatentChunk(0, _latent(2), 5), 5)

    def test_linear_constant_field(self):
        field = LinearField(matrix=0.0, offset=1.0)
        v = field.eval_full(LatentChunk(0, _latent(0), 3), 3)
        assert np.array_equal(v, np.ones(SHAPE))

    def test_linear_matrix_form(self):
        matrix = np.arange(16.0).reshape(4, 4)
        x = _latent(0)
        v = LinearField(matrix).eval_full(LatentChunk(0, x, 3), 3)
        assert np.allclose(v, x @ matrix.T)

    def test_sparse_rows_are_full_rows(self):
        data, noise = _latent(0), _latent(1)
        field = RectifiedOracleField({0: ChunkTargets(data, noise)})
        chunk = LatentChunk(0, _latent(2), 4)
        mask = np.zeros(SHAPE[:3], dtype=bool)
        mask[1, 2, 0] = mask[0, 0, 1] = True
        rows = field.eval_sparse(chunk, 4, mask)
        full = field.eval_full(chunk, 4).reshape(-1, SHAPE[-1])
        assert np.array_equal(rows, full[mask.ravel()])


# ── ToyAttentionField ──────────────────────────────────────────────── #


class TestToyAttentionField:
    def test_channel_bounds(self):
        with pytest.raises(ValueError):
            ToyAttentionField(3, NoiseSchedule(10))
        with pytest.raises(ValueError):
            ToyAttentionField(17, NoiseSchedule(10))

    def test_same_seed_same_weights(self):
        a, b = _field(), _field()
        assert np.array_equal(a.w_q, b.w_q) and np.array_equal(a.w_2, b.w_2)

    def test_first_chunk_matches_dense_reference(self):
        field = _field()
        x = _latent(5)
        v = field.eval_full(LatentChunk(0, x, 7), 7)
        ref = _dense_reference(field, x, 7, 0, [])
        assert np.allclose(v, ref, rtol=1e-12, atol=1e-12)

    def test_cached_context_matches_dense_reference(self):
        field = _field()
        first, second = _latent(5), _latent(6)
        kv = finalize_chunk_kv(KVCacheState(), LatentChunk(0, first, 0), field)
        v = field.eval_full(LatentChunk(1, second, 4), 4, kv)
        ref = _dense_reference(field, second, 4, 1, [first])
        assert np.allclose(v, ref, rtol=1e-12, atol=1e-12)

    def test_single_token_chunk(self):
        field = _field()
        shape = (1, 1, 1, 4)
        first, second = _latent(1, shape), _latent(2, shape)
        kv = finalize_chunk_kv(KVCacheState(), LatentChunk(0, first, 0), field)
        v = field.eval_full(LatentChunk(1, second, 3), 3, kv)
        ref = _dense_reference(field, second, 3, 1, [first])
        assert np.allclose(v, ref, rtol=1e-12, atol=1e-12)

    def test_in_flight_context_matches_cached(self):
        field = _field()
        first, second = _latent(5), _latent(6)
        kv = finalize_chunk_kv(KVCacheState(), LatentChunk(0, first, 0), field)
        cached = field.eval_full(LatentChunk(1, second, 4), 4, kv)
        context = [ContextChunk(LatentChunk(0, first, 0))]
        in_flight = field.eval_full(LatentChunk(1, second, 4), 4, context=context)
        assert np.allclose(cached, in_flight, rtol=1e-12, atol=1e-12)

    def test_missing_context_raises(self):
        with pytest.raises(CacheStateError):
            _field().eval_full(LatentChunk(1, _latent(0), 4), 4)

    def test_context_perturbation_changes_output(self):
        field = _field()
        first, second = _latent(5), _latent(6)
        kv_a = finalize_chunk_kv(KVCacheState(), LatentChunk(0, first, 0), field)
        kv_b = finalize_chunk_kv(
            KVCacheState(), LatentChunk(0, first + 0.5, 0), field
        )
        va = field.eval_full(LatentChunk(1, second, 4), 4, kv_a)
        vb = field.eval_full(LatentChunk(1, second, 4), 4, kv_b)
        assert not np.allclose(va, vb)

    def test_uniform_column_has_constant_residual(self):
        field = _field()
        column = np.broadcast_to(_latent(3, (1, 3, 3, 4)), SHAPE).copy()
        r_early = field.eval_full(LatentChunk(0, column, 9), 9) - column
        r_late = field.eval_full(LatentChunk(0, column * 0.5, 2), 2) - column * 0.5
        assert np.allclose(r_early, 0.0, atol=1e-12)
        assert np.allclose(r_late, 0.0, atol=1e-12)

    def test_repeated_frame_gates_to_zero(self):
        x = _latent(3)
        x[1, 0, 2] = x[0, 0, 2]
        gate = _field().motion_gate(x).reshape(SHAPE[:3])
        assert gate[0, 0, 2] == 0.0 and gate[1, 0, 2] == 0.0
        assert np.all(gate[:, 1:] > 0.0)

    def test_single_frame_is_ungated(self):
        gate = _field().motion_gate(_latent(3, (1, 3, 3, 4)))
        assert np.array_equal(gate, np.ones(9))

    def test_static_token_residual_is_exact_under_any_context(self):
        field = _field()
        first = _latent(5)
        kv = finalize_chunk_kv(KVCacheState(), LatentChunk(0, first, 0), field)
        x = _latent(6)
        x[:, 1, 1] = x[0, 1, 1]
        for t in (8, 3):
            v = field.eval_full(LatentChunk(1, x, t), t, kv)
            assert np.array_equal(v[:, 1, 1], x[:, 1, 1])

    def test_anchor_targets_offset(self):
        sched = NoiseSchedule(10)
        data, noise = _latent(0), _latent(1)
        plain = ToyAttentionField(4, sched, seed=3)
        anchored = ToyAttentionField(
            4, sched, targets={0: ChunkTargets(data, noise)}, seed=3
        )
        x = _latent(2)
        diff = anchored.eval_full(LatentChunk(0, x, 6), 6) - plain.eval_full(
            LatentChunk(0, x, 6), 6
        )
        decay = 0.9**10
        assert np.allclose(diff, (decay * noise - data) / (1.0 - decay))


# ── sparse evaluation ──────────────────────────────────────────────── #


class TestSparseEvaluation:
    def test_all_active_is_bit_identical(self):
        field = _field()
        chunk = LatentChunk(0, _latent(4), 6)
        rows = field.eval_sparse(chunk, 6, np.ones(SHAPE[:3], dtype=bool))
        full = field.eval_full(chunk, 6).reshape(-1, SHAPE[-1])
        assert np.array_equal(rows, full)

    def test_random_masks_with_stale_table(self):
        field = _field()
        first = _latent(0)
        kv = finalize_chunk_kv(KVCacheState(), LatentChunk(0, first, 0), field)
        x = _latent(1)
        chunk = LatentChunk(1, x, 5)
        rng = np.random.default_rng(9)
        for _ in range(10):
            mask = rng.random(SHAPE[:3]) < 0.4
            mask.flat[rng.integers(mask.size)] = True
            table = field.project_kv(_latent(2), 6)
            fresh = field.project_kv(x, 5)
            table.keys[mask.ravel()] = fresh.keys[mask.ravel()]
            table.values[mask.ravel()] = fresh.values[mask.ravel()]
            rows = field.eval_sparse(chunk, 5, mask, kv, token_kv=table)
            full = field.eval_full(chunk, 5, kv, token_kv=table)
            expected = full.reshape(-1, SHAPE[-1])[mask.ravel()]
            assert np.allclose(rows, expected, rtol=1e-12, atol=1e-12)

    def test_single_token_matches_reference(self):
        field = _field()
        x = _latent(4)
        mask = np.zeros(SHAPE[:3], dtype=bool)
        mask[1, 2, 1] = True
        rows = field.eval_sparse(LatentChunk(0, x, 6), 6, mask)
        ref = _dense_reference(field, x, 6, 0, [])
        assert rows.shape == (1, 4)
        assert np.allclose(rows[0], ref[1, 2, 1], rtol=1e-12, atol=1e-12)

    def test_inactive_token_at_other_position_changes_row(self):
        field = _field()
        x = _latent(4)
        chunk = LatentChunk(0, x, 6)
        mask = np.zeros(SHAPE[:3], dtype=bool)
        mask[1, 1, 1] = True
        table = field.project_kv(x, 6)
        base = field.eval_sparse(chunk, 6, mask, token_kv=table)
        other = np.ravel_multi_index((0, 1, 2), SHAPE[:3])
        table.keys[other] += 5.0
        table.values[other] += 5.0
        shifted = field.eval_sparse(chunk, 6, mask, token_kv=table)
        assert not np.allclose(base, shifted)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            _field().eval_sparse(
                LatentChunk(0, _latent(0), 6), 6, np.zeros(SHAPE[:3], dtype=bool)
            )

    def test_mask_shape_checked(self):
        with pytest.raises(ValueError):
            _field().eval_sparse(
                LatentChunk(0, _latent(0), 6), 6, np.ones((1, 3, 3), dtype=bool)
            )


# ── finalize_chunk_kv ──────────────────────────────────────────────── #


class TestFinalizeChunkKV:
    def test_token_counts(self):
        field = _field()
        kv = finalize_chunk_kv(KVCacheState(), LatentChunk(0, _latent(0), 0), field)
        assert kv.total_tokens == 18
        kv = finalize_chunk_kv(kv, LatentChunk(1, _latent(1), 0), field)
        assert kv.total_tokens == 36
        assert kv.chunk_indices == (0, 1)

    def test_blocks_are_read_only(self):
        kv = finalize_chunk_kv(
            KVCacheState(), LatentChunk(0, _latent(0), 0), _field()
        )
        with pytest.raises(ValueError):
            kv.blocks[0].keys[0, 0, 0] = 1.0

    def test_duplicate_chunk_rejected(self):
        field = _field()
        kv = finalize_chunk_kv(KVCacheState(), LatentChunk(0, _latent(0), 0), field)
        with pytest.raises(CacheStateError):
            finalize_chunk_kv(kv, LatentChunk(0, _latent(1), 0), field)

    def test_out_of_order_rejected(self):
        field = _field()
        kv = finalize_chunk_kv(KVCacheState(), LatentChunk(1, _latent(0), 0), field)
        with pytest.raises(CacheStateError):
            finalize_chunk_kv(kv, LatentChunk(0, _latent(1), 0), field)

    def test_original_state_untouched(self):
        field = _field()
        empty = KVCacheState()
        finalize_chunk_kv(empty, LatentChunk(0, _latent(0), 0), field)
        assert empty.total_tokens == 0
