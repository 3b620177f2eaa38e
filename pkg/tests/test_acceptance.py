"""End-to-end checks on the default moving-blob experiment.

These run the full 50-step schedule over several seeds and are marked
``slow``; select them with ``pytest -m slow``.
"""

from __future__ import annotations

import numpy as np
import pytest

from app.analysis import accumulation_inputs, open_loop_crossings, weight_localization
from app.config import DEFAULT_CONFIG_PATH, load_config
from app.experiment import (
    VANILLA_REFERENCE,
    compare_to_vanilla,
    execute_policy,
    match_compute,
    prepare,
    verify,
)
from app.flops import flops_account
from app.trace import Phase

pytestmark = pytest.mark.slow

FIVE_SEEDS = [0, 1, 2, 3, 4]
TEN_SEEDS = list(range(10))
TAUS = [0.05, 0.1, 0.2, 0.4, 0.8]


@pytest.fixture(scope="module")
def config():
    return load_config(DEFAULT_CONFIG_PATH)


@pytest.fixture(scope="module")
def setups(config):
    return {seed: prepare(config, seed) for seed in FIVE_SEEDS}


# ── degeneration and equivalence ───────────────────────────────────── #


class TestEquivalences:
    @pytest.mark.parametrize("seed", FIVE_SEEDS)
    def test_unit_floor_degenerates_to_chunk_level(self, config, setups, seed):
        chunk = execute_policy(config, config.policy("chunk-level"), setups[seed])
        flat = config.policy("motioncache").model_copy(update={"alpha": 1.0})
        cached = execute_policy(config, flat, setups[seed])
        assert np.array_equal(cached.final, chunk.final)
        assert [r.n_active for r in cached.records] == [
            r.n_active for r in chunk.records
        ]

    def test_vanishing_thresholds_match_vanilla(self, config, setups):
        setup = setups[0]
        vanilla = execute_policy(config, VANILLA_REFERENCE, setup)
        tiny = config.policy("motioncache").model_copy(
            update={"tau": 1e-12, "tau_chunk": 1e-12}
        )
        cached = execute_policy(config, tiny, setup)
        assert np.abs(cached.final - vanilla.final).max() <= 1e-12
        vanilla_ledger = flops_account(vanilla.to_trace())
        cached_ledger = flops_account(cached.to_trace())
        assert cached_ledger.total == vanilla_ledger.total


# ── importance maps ───────────────────────────────────────────────── #


class TestImportanceMaps:
    @pytest.mark.parametrize("seed", FIVE_SEEDS)
    def test_weights_concentrate_on_motion(self, config, setups, seed):
        setup = setups[seed]
        result = execute_policy(
            config, config.policy("motioncache"), setup, "latents"
        )
        table = weight_localization(result.to_trace(), setup.scenario.motion_masks)
        refined = table[table["phase"] == Phase.PHASE2.label]
        assert not refined.empty
        assert (refined["inside_mean"] > refined["outside_mean"]).all()

    def test_open_loop_crossings_shrink_with_tau(self, config, setups):
        result = execute_policy(
            config, config.policy("motioncache"), setups[0], "latents"
        )
        inputs = accumulation_inputs(result.to_trace())
        assert inputs
        for pairs in inputs.values():
            weights = [w for w, _ in pairs]
            deltas = [d for _, d in pairs]
            totals = [
                int(open_loop_crossings(weights, deltas, tau).sum()) for tau in TAUS
            ]
            assert totals == sorted(totals, reverse=True)


# ── statistical checks over ten seeds ─────────────────────────────── #


class TestStatisticalChecks:
    def test_frame_difference_beats_random_ranking(self, config):
        ten = config.model_copy(update={"seeds": TEN_SEEDS})
        assert verify(ten, "ndcg").passed

    def test_residual_change_tracks_frame_difference(self, config):
        ten = config.model_copy(update={"seeds": TEN_SEEDS})
        report = verify(ten, "lemma")
        assert report.passed
        assert np.isfinite(report.statistics["max_constant"])

    def test_quality_at_matched_compute(self, config):
        wins = 0
        for seed in TEN_SEEDS:
            setup = prepare(config, seed)
            vanilla = execute_policy(config, VANILLA_REFERENCE, setup)
            chunk = execute_policy(config, config.policy("chunk-level"), setup)
            _, cached = match_compute(
                config, config.policy("motioncache"), chunk.token_forwards, setup
            )
            gap = abs(cached.token_forwards - chunk.token_forwards)
            assert gap <= 0.05 * chunk.token_forwards
            mse_cached = compare_to_vanilla(cached, vanilla).mse
            mse_chunk = compare_to_vanilla(chunk, vanilla).mse
            wins += mse_cached <= mse_chunk
        assert wins >= 8
