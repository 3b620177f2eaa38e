"""Tests for app.flops: per-step cost model and the ledger."""

from __future__ import annotations

import pytest

from app.core import NoiseSchedule
from app.fields import ToyAttentionField
from app.flops import FlopCounts, ModelDims, flops_account, step_flops, sum_counts
from app.policies import PolicyConfig, run_denoise
from app.scenario import BlobParams, generate_moving_blob

DIMS = ModelDims(width=2, ffn_width=4)


@pytest.fixture(scope="module")
def traces():
    params = BlobParams(chunks=2, frames=2, height=6, width=6, channels=4, radius=2.0)
    scenario = generate_moving_blob(params, seed=0)
    sched = NoiseSchedule(10)
    field = ToyAttentionField(4, sched, scenario.targets(), seed=0)
    out = {}
    for policy in (
        PolicyConfig(kind="vanilla"),
        PolicyConfig(kind="motioncache", tau=0.2, full_computations=2, warmup=2),
    ):
        out[policy.kind] = run_denoise(
            policy, field, scenario, sched, dims=DIMS
        ).to_trace()
    return out


# ── step_flops ─────────────────────────────────────────────────────── #


class TestStepFlops:
    def test_full_step_attention(self):
        counts = step_flops(4, 4, 0, DIMS)
        assert counts.attention == 128
        assert counts.attention_gemm == 8 * 4 * 2 * 2
        assert counts.ffn_gemm == 4 * 4 * 2 * 4
        assert counts.reuse == 0

    def test_full_skip_has_no_compute(self):
        counts = step_flops(0, 4, 4, DIMS)
        assert counts.compute == 0
        assert counts.reuse == 4 * 2

    def test_half_active_halves_attention(self):
        full = step_flops(8, 16, 0, DIMS)
        half = step_flops(4, 16, 4, DIMS)
        assert 2 * half.attention == full.attention
        assert 2 * half.attention_gemm == full.attention_gemm

    def test_total_is_sum_of_categories(self):
        counts = step_flops(3, 9, 5, DIMS)
        assert counts.total == sum(counts.as_dict().values())

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            step_flops(-1, 4, 0, DIMS)


# ── ledger ─────────────────────────────────────────────────────────── #


class TestFlopsLedger:
    def test_matches_recorded_counts(self, traces):
        for trace in traces.values():
            ledger = flops_account(trace)
            assert [c for _, _, c in ledger.steps] == [r.flops for r in trace.records]

    def test_total_is_sum_of_steps(self, traces):
        ledger = flops_account(traces["motioncache"])
        by_chunk = sum_counts(ledger.per_chunk().values())
        assert ledger.total == by_chunk
        assert ledger.total.total == int(ledger.to_frame()["total"].sum())

    def test_categories_non_negative(self, traces):
        frame = flops_account(traces["motioncache"]).to_frame()
        categories = ["attention", "attention_gemm", "ffn_gemm", "reuse"]
        assert (frame[categories] >= 0).all().all()

    def test_vanilla_dominates(self, traces):
        vanilla = flops_account(traces["vanilla"])
        cached = flops_account(traces["motioncache"])
        assert vanilla.dominates(cached)
        assert vanilla.total.reuse == 0

    def test_dims_override(self, traces):
        base = flops_account(traces["vanilla"])
        wide = flops_account(traces["vanilla"], ModelDims(width=4, ffn_width=4))
        assert wide.total.attention == 2 * base.total.attention

    def test_empty_sum(self):
        assert sum_counts([]) == FlopCounts()

