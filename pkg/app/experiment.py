"""Experiment orchestration: runs, sweeps, verifications and exports.

Every entry point takes a validated :class:`~app.config.ExperimentConfig`.
Scenario, schedule and velocity field are rebuilt from the config for each
seed, so a config plus a seed fully determines every output.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app import registry
from app.analysis import (
    QualityReport,
    lemma_check,
    prop1_check,
    quality_metrics,
    ranking_check,
)
from app.config import ExperimentConfig, config_hash, scenario_hash
from app.core import CacheStateError, LatentChunk, NoiseSchedule
from app.fields import (
    KVCacheState,
    LinearField,
    RectifiedOracleField,
    ToyAttentionField,
    VelocityField,
    finalize_chunk_kv,
)
from app.flops import FlopsLedger, flops_account
from app.policies import DenoiseResult, PolicyConfig, run_denoise
from app.scenario import MovingBlobScenario, generate_moving_blob
from app.trace import RunTrace, Verbosity, verbosity_at_least, write_trace

try:
    from PIL import Image
except ImportError:  # pragma: no cover - Pillow ships with the requirements
    Image = None  # type: ignore[assignment]

logger = logging.getLogger(__name__)

SweepParameter = Literal["alpha", "K", "tau"]
VerifyKind = Literal["prop1", "lemma", "ndcg", "sparse-dense"]

SWEEP_FIELDS: dict[str, str] = {
    "alpha": "alpha",
    "K": "full_computations",
    "tau": "tau",
}
"""Sweep parameter name to :class:`PolicyConfig` field."""

VANILLA_REFERENCE = PolicyConfig(name="vanilla", kind="vanilla")
"""Reference policy every run compares against."""

LEMMA_MIN_SPEARMAN = 0.5
NDCG_MIN_MARGIN = 0.15
SPARSE_DENSE_TOLERANCE = 1e-12
PASS_FRACTION = 0.8
"""Share of seeds that must pass the statistical checks (lemma, ndcg)."""

MATCH_TOLERANCE = 0.05
"""Relative token-forward tolerance of :func:`match_compute`."""

TIMINGS_NAME = "timings.csv"
"""Per-run wall-clock seconds, written next to ``summary.json``."""


@dataclass(frozen=True)
class SeedSetup:
    """Inputs shared by every policy run of one seed."""

    seed: int
    scenario: MovingBlobScenario
    schedule: NoiseSchedule
    velocity_field: VelocityField


@dataclass
class RunSummary:
    """Rows of ``summary.json`` plus where they were written.

    ``timings`` holds wall-clock seconds per run; they go to ``timings.csv``
    only, so ``summary.json`` stays byte-identical across reruns.
    """

    config_hash: str
    runs: list[dict[str, Any]]
    quality: list[dict[str, Any]]
    summary_path: Path
    reused: bool = False
    timings: list[dict[str, Any]] = field(default_factory=list)

    def frame(self) -> pd.DataFrame:
        runs = pd.DataFrame(self.runs)
        if not self.quality:
            return runs
        return runs.merge(pd.DataFrame(self.quality), on=["seed", "policy"], how="left")


@dataclass
class VerificationReport:
    kind: str
    passed: bool
    statistics: dict[str, float]
    details: pd.DataFrame = field(default_factory=pd.DataFrame)

    def as_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "passed": self.passed,
            "statistics": _json_safe(self.statistics),
        }


# ── building blocks ────────────────────────────────────────────────── #


def build_schedule(config: ExperimentConfig) -> NoiseSchedule:
    spec = config.schedule
    return NoiseSchedule(spec.total_steps, spec.window, spec.kind, spec.shift)


def build_scenario(config: ExperimentConfig, seed: int) -> MovingBlobScenario:
    return generate_moving_blob(config.scenario.blob_params(), seed)


def build_field(
    config: ExperimentConfig, scenario: MovingBlobScenario, schedule: NoiseSchedule
) -> VelocityField:
    spec = config.field
    if spec.kind == "rectified-oracle":
        return RectifiedOracleField(scenario.targets(), seed=spec.weight_seed)
    if spec.kind == "linear-field":
        return LinearField(spec.linear_scale, spec.linear_offset, seed=spec.weight_seed)
    return ToyAttentionField(
        channels=scenario.chunk_shape[-1],
        schedule=schedule,
        targets=scenario.targets(),
        seed=spec.weight_seed,
        gain=spec.gain,
        temporal_decay=spec.temporal_decay,
        spatial_decay=spec.spatial_decay,
        hidden_width=spec.hidden_width,
        max_frequency=spec.max_frequency,
        embed_scale=spec.embed_scale,
    )


def prepare(config: ExperimentConfig, seed: int) -> SeedSetup:
    schedule = build_schedule(config)
    scenario = build_scenario(config, seed)
    return SeedSetup(seed, scenario, schedule, build_field(config, scenario, schedule))


def execute_policy(
    config: ExperimentConfig,
    policy: PolicyConfig,
    setup: SeedSetup,
    verbosity: Verbosity | None = None,
) -> DenoiseResult:
    """Run one policy on a prepared seed."""
    return run_denoise(
        policy,
        setup.velocity_field,
        setup.scenario,
        setup.schedule,
        dims=config.model_dims,
        verbosity=verbosity or config.verbosity,
        stale_kv=config.field.stale_kv,
    )


def latent_digest(array: np.ndarray) -> str:
    """SHA-256 of the little-endian float64 bytes of *array*."""
    data = np.ascontiguousarray(array, dtype="<f8")
    return hashlib.sha256(data.tobytes()).hexdigest()


def compare_to_vanilla(result: DenoiseResult, vanilla: DenoiseResult) -> QualityReport:
    """Quality of *result* against the vanilla output, ranged on vanilla."""
    span = float(np.ptp(vanilla.final))
    return quality_metrics(result.final, vanilla.final, span if span > 0.0 else 1.0)


def _json_safe(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(item) for item in value]
    if isinstance(value, (np.integer, np.bool_)):
        return value.item()
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
    return value


def _summary_row(
    seed: int,
    result: DenoiseResult,
    ledger: FlopsLedger,
    vanilla_ledger: FlopsLedger,
    trace_file: str,
) -> dict[str, Any]:
    total = ledger.total
    baseline = vanilla_ledger.total.compute
    n_steps = len(result.records)
    n_tokens = result.records[0].n_tokens if result.records else 0
    return {
        "seed": seed,
        "policy": result.policy.label,
        "kind": result.policy.kind,
        "token_forwards": result.token_forwards,
        "active_ratio": result.token_forwards / max(n_steps * n_tokens, 1),
        **{f"flops_{name}": value for name, value in total.as_dict().items()},
        "flops_compute": total.compute,
        "flops_total": total.total,
        "speedup_vs_vanilla": (
            baseline / total.compute if total.compute else float("inf")
        ),
        "memory_bytes": result.peak_memory_bytes,
        "degenerate": result.degenerate,
        "digest": latent_digest(result.final),
        "trace": trace_file,
    }


def _write_summary(summary: RunSummary, name: str) -> None:
    payload = {
        "name": name,
        "config_hash": summary.config_hash,
        "runs": summary.runs,
        "quality": summary.quality,
    }
    path = summary.summary_path
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(_json_safe(payload), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    summary.frame().to_csv(path.with_suffix(".csv"), index=False)


def _reuse_summary(
    config: ExperimentConfig, digest: str, db_path: Path
) -> RunSummary | None:
    summary_path: str | None = None
    for seed in config.seeds:
        for policy in config.policies:
            row = registry.lookup_run(digest, policy.label, seed, db_path=db_path)
            if row is None or not row["summary_path"]:
                return None
            summary_path = row["summary_path"]
    if summary_path is None or not Path(summary_path).exists():
        return None
    payload = json.loads(Path(summary_path).read_text(encoding="utf-8"))
    if payload.get("config_hash") != digest:
        return None
    logger.info("[run] reusing summary=%s", summary_path)
    return RunSummary(
        digest, payload["runs"], payload["quality"], Path(summary_path), reused=True
    )


# ── run ────────────────────────────────────────────────────────────── #


def run(config: ExperimentConfig, reuse: bool = False) -> RunSummary:
    """Run every configured policy on every seed and write the summary.

    A vanilla reference is always computed; it is traced only when a vanilla
    policy is configured.  Traces land in ``<output_dir>/traces`` and the
    comparison in ``summary.json`` / ``summary.csv``.

    Parameters
    ----------
    config : ExperimentConfig
        Validated experiment.
    reuse : bool
        Return the stored summary when the registry already holds every run
        of this configuration.

    Returns
    -------
    RunSummary
        Per-run rows and quality-vs-vanilla rows.

    """
    out = Path(config.output_dir)
    db_path = out / registry.DB_NAME
    digest = config_hash(config)
    if reuse:
        stored = _reuse_summary(config, digest, db_path)
        if stored is not None:
            return stored

    summary = RunSummary(digest, [], [], out / "summary.json")
    for seed in config.seeds:
        setup = prepare(config, seed)
        inputs_hash = scenario_hash(config, seed)
        started = time.perf_counter()
        vanilla = execute_policy(config, VANILLA_REFERENCE, setup)
        vanilla_seconds = time.perf_counter() - started
        vanilla_ledger = flops_account(vanilla.to_trace())
        for policy in config.policies:
            if policy.kind == "vanilla":
                result = replace(vanilla, policy=policy)
                seconds = vanilla_seconds
            else:
                started = time.perf_counter()
                result = execute_policy(config, policy, setup)
                seconds = time.perf_counter() - started
            summary.timings.append(
                {"seed": seed, "policy": policy.label, "seconds": seconds}
            )
            trace = result.to_trace(digest, inputs_hash, seed)
            trace_file = f"traces/{policy.label}_seed{seed}.mctr"
            write_trace(trace, out / trace_file)
            ledger = flops_account(trace)
            row = _summary_row(seed, result, ledger, vanilla_ledger, trace_file)
            summary.runs.append(row)

            mse: float | None = None
            if policy.kind != "vanilla":
                quality = compare_to_vanilla(result, vanilla)
                mse = quality.mse
                summary.quality.append(
                    {"seed": seed, "policy": policy.label, **quality.as_dict()}
                )
            registry.record_run(
                digest,
                inputs_hash,
                seed,
                policy.label,
                policy.kind,
                str(out / trace_file),
                str(summary.summary_path),
                row["flops_total"],
                row["token_forwards"],
                mse,
                seconds,
                db_path=db_path,
            )
            logger.info(
                "[run] seed=%d policy=%s forwards=%d speedup=%.3f seconds=%.3f",
                seed,
                policy.label,
                row["token_forwards"],
                row["speedup_vs_vanilla"],
                seconds,
            )

    _write_summary(summary, config.name)
    pd.DataFrame(summary.timings).to_csv(out / TIMINGS_NAME, index=False)
    logger.info("[run] summary=%s rows=%d", summary.summary_path, len(summary.runs))
    return summary


# ── sweep ──────────────────────────────────────────────────────────── #


def _sweep_base(config: ExperimentConfig, policy_name: str | None) -> PolicyConfig:
    if policy_name is not None:
        return config.policy(policy_name)
    for policy in config.policies:
        if policy.kind == "motioncache":
            return policy
    raise ValueError("sweep needs a motioncache policy in the configuration")


def sweep(
    config: ExperimentConfig,
    parameter: SweepParameter,
    values: list[float],
    policy_name: str | None = None,
    seed: int | None = None,
) -> pd.DataFrame:
    """One run per value of *parameter*, plus the chunk-level baseline row.

    The table (``value, psnr, ssim, mse, flops, token_forwards, digest``) is
    also written to ``<output_dir>/sweep_<parameter>.csv``.

    Raises
    ------
    ValueError
        On an empty value list, an unknown parameter, a non-integral ``K``
        or a value the policy model rejects.

    """
    if not values:
        raise ValueError("sweep needs at least one value")
    if parameter not in SWEEP_FIELDS:
        raise ValueError(f"unknown sweep parameter {parameter!r}")
    base = _sweep_base(config, policy_name)
    setup = prepare(config, config.seeds[0] if seed is None else seed)
    vanilla = execute_policy(config, VANILLA_REFERENCE, setup, "decisions")

    baseline = PolicyConfig(
        name="chunk-level",
        kind="chunk-level",
        tau=base.chunk_threshold,
        warmup=base.warmup,
        eps_num=base.eps_num,
    )
    candidates: list[tuple[str, float | None, PolicyConfig]] = []
    for value in values:
        if parameter == "K" and not float(value).is_integer():
            raise ValueError(f"K must be an integer, got {value}")
        cast: float | int = int(value) if parameter == "K" else float(value)
        update = {SWEEP_FIELDS[parameter]: cast, "name": f"{parameter}={cast}"}
        try:
            policy = PolicyConfig.model_validate(base.model_dump() | update)
        except ValidationError as exc:
            raise ValueError(f"invalid {parameter}={value}: {exc}") from exc
        candidates.append((parameter, float(cast), policy))
    candidates.append(("baseline", None, baseline))

    rows = []
    for name, value, policy in candidates:
        result = execute_policy(config, policy, setup, "decisions")
        quality = compare_to_vanilla(result, vanilla)
        ledger = flops_account(result.to_trace())
        rows.append(
            {
                "parameter": name,
                "value": value,
                "policy": policy.label,
                "psnr": quality.psnr,
                "ssim": quality.ssim,
                "mse": quality.mse,
                "flops": ledger.total.compute,
                "token_forwards": result.token_forwards,
                "digest": latent_digest(result.final),
            }
        )
    table = pd.DataFrame(rows)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / f"sweep_{parameter}.csv", index=False)
    logger.info("[sweep] parameter=%s rows=%d", parameter, len(table))
    return table


# ── verify ─────────────────────────────────────────────────────────── #


def _vanilla_trace(config: ExperimentConfig, seed: int) -> RunTrace:
    setup = prepare(config, seed)
    return execute_policy(config, VANILLA_REFERENCE, setup, "residuals").to_trace()


def sparse_dense_deviation(setup: SeedSetup, trials: int = 20) -> float:
    """Largest relative gap between sparse rows and the matching full rows.

    Each chunk is checked at random timesteps with random masks, including a
    single-token and an all-token mask, against one shared stale K/V table.
    """
    scenario = setup.scenario
    velocity_field = setup.velocity_field
    total_steps = setup.schedule.total_steps
    rng = np.random.default_rng([setup.seed, 2])
    kv = KVCacheState()
    worst = 0.0
    grid = scenario.chunk_shape[:3]
    n_tokens = int(np.prod(grid))
    for index in range(scenario.chunks):
        for trial in range(trials):
            t = int(rng.integers(1, total_steps + 1))
            sigma = setup.schedule.sigma(t)
            x = (1.0 - sigma) * scenario.x_data[index] + sigma * scenario.x_noise[index]
            if trial == 0:
                mask = np.zeros(n_tokens, dtype=bool)
                mask[rng.integers(n_tokens)] = True
            elif trial == 1:
                mask = np.ones(n_tokens, dtype=bool)
            else:
                mask = rng.random(n_tokens) < rng.uniform(0.05, 0.95)
                mask[rng.integers(n_tokens)] = True
            mask = mask.reshape(grid)

            chunk = LatentChunk(index, x, t)
            table = velocity_field.project_kv(scenario.x_noise[index], total_steps)
            fresh = velocity_field.project_kv(x, t)
            flat = mask.ravel()
            table.keys[flat] = fresh.keys[flat]
            table.values[flat] = fresh.values[flat]
            full = velocity_field.eval_full(chunk, t, kv, token_kv=table)
            rows = velocity_field.eval_sparse(chunk, t, mask, kv, token_kv=table)
            expected = full.reshape(n_tokens, -1)[flat]
            scale = max(float(np.abs(expected).max()), 1e-300)
            worst = max(worst, float(np.abs(rows - expected).max()) / scale)
        kv = finalize_chunk_kv(
            kv, LatentChunk(index, scenario.x_data[index], 0), velocity_field
        )
    return worst


def verify(
    config: ExperimentConfig,
    kind: VerifyKind,
    *,
    proxy: Literal["frame-difference", "oracle"] = "frame-difference",
    permutations: int = 100,
    trials: int = 20,
) -> VerificationReport:
    """Run one analysis over fresh runs of every seed and judge it.

    ``prop1`` and ``sparse-dense`` must hold on every seed; ``lemma`` and
    ``ndcg`` on at least :data:`PASS_FRACTION` of the seeds.
    """
    rows: list[dict[str, Any]] = []
    for seed in config.seeds:
        if kind == "prop1":
            error = prop1_check(_vanilla_trace(config, seed))
            rows.append(
                {
                    "seed": seed,
                    "samples": error.n_samples,
                    "max_relative_violation": max(
                        error.max_relative_violation,
                        error.token_max_relative_violation,
                    ),
                    "max_degenerate_violation": error.max_degenerate_violation,
                    "passed": error.passed,
                }
            )
        elif kind == "lemma":
            lemma = lemma_check(_vanilla_trace(config, seed))
            rows.append(
                {
                    "seed": seed,
                    "samples": lemma.n_samples,
                    "spearman": lemma.spearman,
                    "constant": lemma.constant,
                    "slope": lemma.slope,
                    "holds_fraction": lemma.holds_fraction,
                    "passed": lemma.spearman > LEMMA_MIN_SPEARMAN
                    and math.isfinite(lemma.constant)
                    and lemma.holds_fraction == 1.0,
                }
            )
        elif kind == "ndcg":
            ranking = ranking_check(
                _vanilla_trace(config, seed), permutations, seed, proxy=proxy
            )
            if proxy == "oracle":
                passed = bool((ranking.samples["ndcg"] == 1.0).all())
            else:
                passed = ranking.margin >= NDCG_MIN_MARGIN
            rows.append(
                {
                    "seed": seed,
                    "mean_ndcg": ranking.mean_ndcg,
                    "mean_random": ranking.mean_random,
                    "margin": ranking.margin,
                    "passed": passed,
                }
            )
        elif kind == "sparse-dense":
            deviation = sparse_dense_deviation(prepare(config, seed), trials)
            rows.append(
                {
                    "seed": seed,
                    "max_deviation": deviation,
                    "passed": deviation <= SPARSE_DENSE_TOLERANCE,
                }
            )
        else:
            raise ValueError(f"unknown verification {kind!r}")

    details = pd.DataFrame(rows)
    share = float(details["passed"].mean())
    required = PASS_FRACTION if kind in ("lemma", "ndcg") else 1.0
    statistics = {"seeds": float(len(details)), "pass_share": share}
    numeric = details.drop(columns=["seed", "passed"]).select_dtypes("number")
    for column in numeric.columns:
        statistics[f"max_{column}"] = float(numeric[column].max())
        statistics[f"min_{column}"] = float(numeric[column].min())
    report = VerificationReport(kind, share >= required, statistics, details)
    logger.info("[verify] kind=%s passed=%s share=%.2f", kind, report.passed, share)
    return report


# ── exports and compute matching ──────────────────────────────────── #


def _gray(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)


def _write_pgm(path: Path, pixels: np.ndarray) -> None:
    height, width = pixels.shape
    lines = [f"P2\n{width} {height}\n255"]
    lines += [" ".join(str(int(v)) for v in row) for row in pixels]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def export_importance_frames(
    trace: RunTrace,
    out_dir: Path,
    motion_masks: np.ndarray | None = None,
    steps: tuple[int, int] | None = None,
    fmt: Literal["png", "pgm"] = "png",
    scale: int = 8,
) -> list[Path]:
    """Write grayscale maps of the recorded weights, one file per frame.

    Each image holds the weight map and, when *motion_masks* (``(chunks * F,
    H, W)``) is given, the ground-truth mask to its right.  File names carry
    chunk, timestep, frame and phase.  *steps* restricts the exported window
    positions to ``[start, stop)``.

    Raises
    ------
    CacheStateError
        If the trace was recorded below ``latents`` verbosity or holds no
        weight maps.

    """
    if not verbosity_at_least(trace.header.verbosity, "latents"):
        raise CacheStateError(
            f"trace verbosity {trace.header.verbosity!r} carries no weight maps"
        )
    if not trace.has_tensor("weights"):
        raise CacheStateError("trace holds no weight maps (motioncache runs only)")
    if fmt == "png" and Image is None:
        logger.warning("[export_importance_frames] Pillow missing; writing PGM")
        fmt = "pgm"

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = trace.header.shape[0]
    written: list[Path] = []
    for record in trace.records:
        weights = record.tensors.get("weights")
        if weights is None:
            continue
        if steps is not None and not steps[0] <= record.step < steps[1]:
            continue
        for f in range(weights.shape[0]):
            panels = [_gray(weights[f])]
            if motion_masks is not None:
                mask = motion_masks[record.chunk * frames + f]
                gap = np.full((mask.shape[0], 1), 128, dtype=np.uint8)
                panels += [gap, _gray(mask.astype(float))]
            pixels = np.hstack(panels)
            name = (
                f"chunk{record.chunk:02d}_t{record.t:03d}_f{f:02d}_"
                f"{record.phase.label}.{fmt}"
            )
            path = out_dir / name
            if fmt == "png":
                image = Image.fromarray(pixels)
                image = image.resize(
                    (pixels.shape[1] * scale, pixels.shape[0] * scale),
                    Image.Resampling.NEAREST,
                )
                image.save(path)
            else:
                _write_pgm(path, pixels)
            written.append(path)
    logger.info("[export_importance_frames] files=%d dir=%s", len(written), out_dir)
    return written


def match_compute(
    config: ExperimentConfig,
    policy: PolicyConfig,
    target_forwards: int,
    setup: SeedSetup,
    tolerance: float = MATCH_TOLERANCE,
    bounds: tuple[float, float] = (1e-6, 1e2),
    max_iter: int = 40,
) -> tuple[PolicyConfig, DenoiseResult]:
    """Tune ``tau`` so the token-forward count lands near *target_forwards*.

    Bisection runs on ``log(tau)`` inside *bounds*; the Phase-1 threshold is
    pinned to its configured value.  Returns the closest run seen when the
    tolerance is not reached.
    """
    if target_forwards <= 0:
        raise ValueError(f"target_forwards must be positive, got {target_forwards}")
    low, high = (math.log(bound) for bound in bounds)
    pinned = policy.chunk_threshold
    best: tuple[float, PolicyConfig, DenoiseResult] | None = None
    for _ in range(max_iter):
        tau = math.exp((low + high) / 2.0)
        candidate = policy.model_copy(update={"tau": tau, "tau_chunk": pinned})
        result = execute_policy(config, candidate, setup, "decisions")
        gap = (result.token_forwards - target_forwards) / target_forwards
        if best is None or abs(gap) < best[0]:
            best = (abs(gap), candidate, result)
        if abs(gap) <= tolerance:
            break
        if gap > 0:
            low = math.log(tau)
        else:
            high = math.log(tau)
    assert best is not None
    if best[0] > tolerance:
        logger.warning(
            "[match_compute] closest forwards gap=%.3f exceeds tolerance=%.3f",
            best[0],
            tolerance,
        )
    return best[1], best[2]


def trace_table(trace: RunTrace) -> pd.DataFrame:
    """One row per step record, for pretty-printing."""
    return pd.DataFrame(
        [
            {
                "chunk": record.chunk,
                "step": record.step,
                "t": record.t,
                "tick": record.tick,
                "mode": record.mode.label,
                "phase": record.phase.label,
                "delta": record.delta,
                "active": record.n_active,
                "tokens": record.n_tokens,
                "flops": record.flops.total,
            }
            for record in trace.records
        ]
    )
