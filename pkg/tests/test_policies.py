"""Tests for app.policies: cache primitives, gates and the denoising loop."""

from __future__ import annotations

import logging

import numpy as np
import pytest

from app.core import CacheStateError, NoiseSchedule, euler_step
from app.fields import RectifiedOracleField, ToyAttentionField
from app.policies import (
    PolicyConfig,
    ResidualCache,
    accumulate,
    approximate_with_cache,
    compute_residual,
    frame_differences,
    importance_map,
    phase1_chunk_decision,
    relative_l1,
    run_denoise,
    soft_map,
    threshold_mask,
)
from app.scenario import BlobParams, generate_moving_blob
from app.trace import DecisionMode, Phase

PARAMS = BlobParams(
    chunks=2, frames=3, height=8, width=8, channels=4, radius=2.5, velocity=(0.0, 1.0)
)
SCHED = NoiseSchedule(12)


@pytest.fixture(scope="module")
def scenario():
    return generate_moving_blob(PARAMS, seed=4)


@pytest.fixture(scope="module")
def toy(scenario):
    return ToyAttentionField(4, SCHED, scenario.targets(), seed=1)


@pytest.fixture(scope="module")
def oracle(scenario):
    return RectifiedOracleField(scenario.targets())


# ── residual cache ─────────────────────────────────────────────────── #


class TestResidualCache:
    def test_starts_unfilled(self):
        cache = ResidualCache((1, 2, 2, 3))
        assert not cache.filled
        with pytest.raises(CacheStateError):
            approximate_with_cache(np.zeros((1, 2, 2, 3)), cache.retrieve())

    def test_full_store_and_retrieve(self):
        cache = ResidualCache((1, 2, 2, 3))
        residual = np.arange(12.0).reshape(1, 2, 2, 3)
        cache.store(residual, step=3)
        assert cache.filled
        assert np.array_equal(cache.retrieve(), residual)
        assert (cache.last_step == 3).all()

    def test_sparse_store_updates_masked_rows(self):
        cache = ResidualCache((1, 2, 2, 3))
        cache.store(np.zeros((1, 2, 2, 3)), step=0)
        mask = np.array([[[True, False], [False, True]]])
        cache.store(np.ones((2, 3)), step=1, mask=mask)
        stored = cache.retrieve()
        assert np.array_equal(stored[mask], np.ones((2, 3)))
        assert np.array_equal(stored[~mask], np.zeros((2, 3)))
        assert cache.last_step.tolist() == [[[1, 0], [0, 1]]]

    def test_sparse_store_checks_rows(self):
        cache = ResidualCache((1, 2, 2, 3))
        with pytest.raises(ValueError):
            cache.store(np.ones((3, 3)), 0, mask=np.ones((1, 2, 2), dtype=bool))

    def test_retrieve_returns_copy(self):
        cache = ResidualCache((1, 1, 1, 2))
        cache.store(np.zeros((1, 1, 1, 2)), 0)
        cache.retrieve()[...] = 5.0
        assert np.array_equal(cache.retrieve(), np.zeros((1, 1, 1, 2)))

    def test_nbytes(self):
        cache = ResidualCache((1, 2, 2, 3))
        assert cache.nbytes == 12 * 8 + 4 * 8


# ── residual primitives ────────────────────────────────────────────── #


class TestResidualPrimitives:
    def test_identity_velocity_gives_zero(self):
        x = np.random.default_rng(0).normal(size=(2, 3))
        assert np.array_equal(compute_residual(x, x), np.zeros((2, 3)))

    def test_scalar_residual(self):
        assert compute_residual(np.array([3.0]), np.array([1.0]))[0] == 2.0

    def test_recovers_velocity(self):
        rng = np.random.default_rng(1)
        v, x = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        assert np.allclose(compute_residual(v, x) + x, v, rtol=0, atol=1e-15)

    def test_zero_residual_reuse(self):
        x = np.arange(4.0)
        assert np.array_equal(approximate_with_cache(x, np.zeros(4)), x)

    def test_unchanged_residual_reproduces_output(self):
        rng = np.random.default_rng(2)
        x, r = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        exact = euler_step(x, x + r, -0.1)
        approx = euler_step(x, approximate_with_cache(x, r), -0.1)
        assert np.array_equal(exact, approx)


class TestRelativeL1:
    def test_identical(self):
        assert relative_l1(np.ones(3), np.ones(3)) == 0.0

    def test_doubling(self):
        assert relative_l1(np.array([2.0, 2.0]), np.array([1.0, 1.0])) == 1.0

    def test_mixed(self):
        assert relative_l1(np.array([1.0, 3.0]), np.array([2.0, 2.0])) == 0.5

    def test_zero_reference_is_inf(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert relative_l1(np.ones(2), np.zeros(2)) == float("inf")
        assert "zero reference" in caplog.text


# ── importance and soft mapping ────────────────────────────────────── #


class TestImportanceMap:
    def test_identical_frames_are_zero(self):
        latent = np.broadcast_to(np.arange(8.0).reshape(1, 2, 2, 2), (3, 2, 2, 2))
        assert np.array_equal(importance_map(latent, None, 0), np.zeros((3, 2, 2)))

    def test_single_token_change(self):
        latent = np.zeros((2, 1, 2, 1))
        latent[1, 0, 1, 0] = 1.0
        m = importance_map(latent, None, 0)
        assert m[1].tolist() == [[0.0, 1.0]]
        assert np.array_equal(m[0], m[1])

    def test_later_chunk_uses_previous_frame(self):
        latent = np.zeros((2, 1, 1, 2))
        reference = np.array([[[1.0, -2.0]]])
        m = importance_map(latent, reference, 1)
        assert m[0, 0, 0] == 3.0

    def test_later_chunk_needs_reference(self):
        with pytest.raises(ValueError):
            importance_map(np.zeros((2, 1, 1, 1)), None, 1)

    def test_single_frame_first_chunk_is_uniform(self):
        m = importance_map(np.zeros((1, 2, 2, 1)), None, 0)
        assert np.array_equal(m, np.ones((1, 2, 2)))

    def test_frame_count_checked(self):
        with pytest.raises(ValueError):
            importance_map(np.zeros((2, 1, 1, 1)), None, 0, frames=3)

    def test_frame_differences_l1_over_channels(self):
        latent = np.zeros((2, 1, 1, 3))
        latent[1, 0, 0] = [1.0, -2.0, 0.5]
        assert frame_differences(latent)[0, 0, 0] == 3.5

    def test_moving_blob_importance_localizes(self, scenario):
        masks = scenario.chunk_masks(0)
        m = importance_map(scenario.x_data[0], None, 0)
        assert m[1:][masks[1:]].mean() > m[1:][~masks[1:]].mean()


class TestSoftMap:
    def test_constant_map_is_floor(self):
        w = soft_map(np.full((2, 3), 4.0), alpha=0.3)
        assert np.allclose(w, 0.3)

    def test_linear_projection(self):
        w = soft_map(np.array([0.0, 5.0, 10.0]), alpha=0.6, eps_num=1e-12)
        assert np.allclose(w, [0.6, 0.8, 1.0], atol=1e-9)

    def test_alpha_one_is_all_ones(self):
        m = np.random.default_rng(0).random((3, 4, 4)) * 7.0
        assert np.array_equal(soft_map(m, alpha=1.0), np.ones((3, 4, 4)))

    def test_normalizes_each_frame(self):
        m = np.stack([np.array([[0.0, 1.0]]), np.array([[0.0, 100.0]])])
        w = soft_map(m, alpha=0.0, eps_num=1e-12)
        assert w[0, 0, 1] == pytest.approx(1.0)
        assert w[1, 0, 1] == pytest.approx(1.0)

    def test_rejects_negative_importance(self):
        with pytest.raises(ValueError):
            soft_map(np.array([[-1.0, 1.0]]), alpha=0.5)


# ── accumulator and gates ──────────────────────────────────────────── #


class TestAccumulator:
    def test_weighted_update(self):
        out = accumulate(np.array([0.3]), np.array([0.5]), 0.2)
        assert out[0] == pytest.approx(0.4)

    def test_zero_delta_unchanged(self):
        acc = np.array([0.1, 0.2])
        assert np.array_equal(accumulate(acc, np.ones(2), 0.0), acc)

    def test_uniform_weights_grow_uniformly(self):
        out = accumulate(np.full(3, 0.25), np.ones(3), 0.5)
        assert np.array_equal(out, np.full(3, 0.75))

    def test_negative_delta_rejected(self):
        with pytest.raises(ValueError):
            accumulate(np.zeros(1), np.ones(1), -0.1)

    def test_threshold_selects_and_resets(self):
        mask, acc = threshold_mask(np.array([0.41, 0.4, 0.0]), 0.4)
        assert mask.tolist() == [True, False, False]
        assert acc.tolist() == [0.0, 0.4, 0.0]

    def test_threshold_all_zero(self):
        mask, _ = threshold_mask(np.zeros(4), 0.1)
        assert not mask.any()

    def test_threshold_must_be_positive(self):
        with pytest.raises(ValueError):
            threshold_mask(np.zeros(1), 0.0)


class TestPhase1ChunkDecision:
    def test_warmup_always_computes(self):
        decision = phase1_chunk_decision(99.0, 5.0, 0.1, 0, 6, 1, 4)
        assert decision.mode is DecisionMode.FULL_COMPUTE
        assert decision.phase is Phase.WARMUP
        assert decision.full_count == 0

    def test_tiny_threshold_computes_and_counts(self):
        decision = phase1_chunk_decision(0.0, 0.01, 1e-12, 2, 6, 5, 4)
        assert decision.mode is DecisionMode.FULL_COMPUTE
        assert decision.full_count == 3
        assert decision.chunk_accumulator == 0.0

    def test_infinite_threshold_skips_and_accumulates(self):
        decision = phase1_chunk_decision(0.2, 0.05, float("inf"), 0, 6, 5, 4)
        assert decision.mode is DecisionMode.FULL_SKIP
        assert decision.chunk_accumulator == pytest.approx(0.25)

    def test_finished_phase_rejected(self):
        with pytest.raises(ValueError):
            phase1_chunk_decision(0.0, 0.1, 0.1, 6, 6, 8, 4)

    def test_open_gate_without_limit(self):
        decision = phase1_chunk_decision(0.0, 0.5, 0.1, 40, None, 45, 4)
        assert decision.mode is DecisionMode.FULL_COMPUTE


# ── run_denoise ────────────────────────────────────────────────────── #


def _motioncache(**overrides) -> PolicyConfig:
    base = dict(kind="motioncache", alpha=0.5, tau=0.1, full_computations=3, warmup=2)
    return PolicyConfig(**(base | overrides))


class TestRunDenoise:
    def test_oracle_lands_on_data(self, scenario, oracle):
        result = run_denoise(PolicyConfig(kind="vanilla"), oracle, scenario, SCHED)
        assert np.allclose(result.final, scenario.x_data, rtol=0, atol=1e-12)

    def test_zero_gain_attention_lands_on_data(self, scenario):
        field = ToyAttentionField(4, SCHED, scenario.targets(), seed=1, gain=0.0)
        result = run_denoise(PolicyConfig(kind="vanilla"), field, scenario, SCHED)
        assert np.allclose(result.final, scenario.x_data, rtol=0, atol=1e-9)

    def test_vanilla_ignores_cache_parameters(self, scenario, toy):
        a = run_denoise(PolicyConfig(kind="vanilla"), toy, scenario, SCHED)
        b = run_denoise(
            PolicyConfig(kind="vanilla", alpha=0.9, tau=3.0, warmup=0),
            toy,
            scenario,
            SCHED,
        )
        assert np.array_equal(a.final, b.final)

    def test_vanilla_records(self, scenario, toy):
        result = run_denoise(PolicyConfig(kind="vanilla"), toy, scenario, SCHED)
        assert len(result.records) == 2 * 12
        assert all(r.mode is DecisionMode.FULL_COMPUTE for r in result.records)
        assert [r.t for r in result.records[:12]] == list(range(12, 0, -1))
        assert {r.n_kv for r in result.records if r.chunk == 1} == {2 * 192}
        assert result.token_forwards == 24 * 192

    def test_tiny_thresholds_match_vanilla(self, scenario, toy):
        vanilla = run_denoise(PolicyConfig(kind="vanilla"), toy, scenario, SCHED)
        cached = run_denoise(
            _motioncache(tau=1e-12, tau_chunk=1e-12), toy, scenario, SCHED
        )
        assert np.array_equal(cached.final, vanilla.final)
        assert [r.flops for r in cached.records] == [r.flops for r in vanilla.records]

    def test_alpha_one_matches_chunk_level(self, scenario, toy):
        chunk = run_denoise(
            PolicyConfig(kind="chunk-level", tau=0.05, warmup=2), toy, scenario, SCHED
        )
        motion = run_denoise(
            _motioncache(alpha=1.0, tau=0.05), toy, scenario, SCHED
        )
        assert np.array_equal(motion.final, chunk.final)
        assert [r.mode for r in motion.records] == [r.mode for r in chunk.records]
        assert all(r.mask is None for r in motion.records)

    def test_long_phase1_matches_chunk_level(self, scenario, toy):
        chunk = run_denoise(
            PolicyConfig(kind="chunk-level", tau=0.05, warmup=2), toy, scenario, SCHED
        )
        motion = run_denoise(
            _motioncache(alpha=0.3, tau=0.05, full_computations=12),
            toy,
            scenario,
            SCHED,
        )
        assert np.array_equal(motion.final, chunk.final)

    def test_static_tokens_are_reused_without_error(self, scenario, toy):
        vanilla = run_denoise(PolicyConfig(kind="vanilla"), toy, scenario, SCHED)
        policy = _motioncache(alpha=0.0, tau=0.15, tau_chunk=1e-12, full_computations=2)
        cached = run_denoise(policy, toy, scenario, SCHED)
        assert any(r.mode is DecisionMode.TOKEN_SPARSE for r in cached.records)
        for index, data in enumerate(scenario.x_data):
            static = np.all(data == data[:1], axis=(0, 3))
            assert static.any() and not static.all()
            assert np.allclose(
                cached.final[index][:, static],
                vanilla.final[index][:, static],
                rtol=0,
                atol=1e-12,
            )
        assert not np.allclose(cached.final, vanilla.final, rtol=0, atol=1e-12)

    def test_token_sparse_steps(self, scenario, oracle):
        policy = _motioncache(alpha=0.0, tau=0.15, tau_chunk=1e-12, full_computations=2)
        result = run_denoise(policy, oracle, scenario, SCHED, verbosity="latents")
        sparse = [r for r in result.records if r.mode is DecisionMode.TOKEN_SPARSE]
        assert sparse
        for record in sparse:
            assert record.phase is Phase.PHASE2
            assert record.mask is not None
            assert record.n_active == int(record.mask.sum())
            assert 0 < record.n_active < record.n_tokens
            assert record.flops.reuse == (record.n_tokens - record.n_active) * 8

    def test_phase_sequence(self, scenario, toy):
        result = run_denoise(
            _motioncache(tau_chunk=1e-12), toy, scenario, SCHED, verbosity="latents"
        )
        phases = [r.phase for r in result.records if r.chunk == 0]
        assert phases[:2] == [Phase.WARMUP, Phase.WARMUP]
        assert phases[2:5] == [Phase.PHASE1] * 3
        assert set(phases[5:]) == {Phase.PHASE2}

    def test_weights_recorded_with_latents(self, scenario, toy):
        result = run_denoise(_motioncache(), toy, scenario, SCHED, verbosity="latents")
        with_weights = [r for r in result.records if "weights" in r.tensors]
        assert with_weights
        assert all(r.step >= 1 for r in with_weights)
        assert all("latent" in r.tensors for r in result.records)

    def test_residual_verbosity(self, scenario, toy):
        result = run_denoise(
            PolicyConfig(kind="vanilla"), toy, scenario, SCHED, verbosity="residuals"
        )
        record = result.records[3]
        assert set(record.tensors) == {"latent", "velocity", "residual"}
        assert np.allclose(
            record.tensors["velocity"],
            record.tensors["latent"] + record.tensors["residual"],
            rtol=0,
            atol=1e-14,
        )

    def test_degenerate_phase1_flagged(self, scenario, toy, caplog):
        with caplog.at_level(logging.WARNING):
            result = run_denoise(_motioncache(tau_chunk=1e9), toy, scenario, SCHED)
        assert result.degenerate_chunks == [0, 1]
        assert "phase 1 never completed" in caplog.text

    def test_step_level_ticks_share_decision(self, scenario, toy):
        sched = NoiseSchedule(12, window=3)
        result = run_denoise(
            PolicyConfig(kind="step-level", tau=0.5, warmup=2), toy, scenario, sched
        )
        by_tick: dict[int, set] = {}
        for record in result.records:
            by_tick.setdefault(record.tick, set()).add(record.mode)
        assert all(len(modes) == 1 for modes in by_tick.values())
        assert DecisionMode.FULL_SKIP in {r.mode for r in result.records}

    def test_overlapping_window_schedule(self, scenario, toy):
        sched = NoiseSchedule(12, window=3)
        result = run_denoise(PolicyConfig(kind="vanilla"), toy, scenario, sched)
        first_tick = {
            c: min(r.tick for r in result.records if r.chunk == c) for c in (0, 1)
        }
        assert first_tick == {0: 0, 1: 4}
        assert max(r.tick for r in result.records) == 15

    def test_caching_policies_hold_more_memory(self, scenario, toy):
        vanilla = run_denoise(PolicyConfig(kind="vanilla"), toy, scenario, SCHED)
        cached = run_denoise(_motioncache(), toy, scenario, SCHED)
        assert cached.peak_memory_bytes > vanilla.peak_memory_bytes

    def test_trace_header(self, scenario, toy):
        trace = run_denoise(_motioncache(name="mc"), toy, scenario, SCHED).to_trace(
            "abc", "def", seed=4
        )
        assert trace.header.policy == "mc"
        assert trace.header.shape == (3, 8, 8, 4)
        assert trace.header.record_count == len(trace.records)
        assert trace.header.field_kind == "toy-attention"

    def test_rejects_bad_noise_shape(self, toy):
        class Flat:
            x_noise = np.zeros((3, 8, 8, 4))

        with pytest.raises(ValueError):
            run_denoise(PolicyConfig(kind="vanilla"), toy, Flat(), SCHED)
