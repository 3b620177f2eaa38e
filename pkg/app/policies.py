"""Residual caching policies and the chunked denoising loop.

Four policies share one loop (:func:`run_denoise`):

``vanilla``
    Every chunk step evaluates the field.
``step-level``
    One scalar accumulator of relative L1 change over all chunks active in
    a tick; the whole tick computes or reuses cached residuals.
``chunk-level``
    The same accumulate-and-threshold gate, kept per chunk.
``motioncache``
    Per-chunk gate for the first ``K`` full computations, then per-token
    accumulators weighted by a frame-difference importance map, so only
    tokens whose weighted budget crosses ``tau`` are re-evaluated.

Skipped tokens reuse their cached residual: ``v ~= x + R``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Protocol

import numpy as np
from pydantic import BaseModel, Field

from app.core import (
    DTYPE,
    CacheStateError,
    LatentChunk,
    NoiseSchedule,
    euler_step,
)
from app.fields import (
    ContextChunk,
    KVCacheState,
    TokenKV,
    VelocityField,
    finalize_chunk_kv,
)
from app.flops import ModelDims, step_flops
from app.trace import (
    DecisionMode,
    Phase,
    RunTrace,
    StepRecord,
    TraceHeader,
    Verbosity,
    verbosity_at_least,
)

logger = logging.getLogger(__name__)

PolicyKind = Literal["vanilla", "step-level", "chunk-level", "motioncache"]

DEFAULT_EPS_NUM = 1e-6
"""Stabilizer added to the max-min range when soft-mapping importance."""


class PolicyConfig(BaseModel):
    """Pydantic model for one caching policy.

    ``tau_chunk`` falls back to ``tau`` when unset.  ``full_computations``
    (``K``) counts Phase-1 computations after the ``warmup`` (``m``) steps.
    """

    name: str = ""
    kind: PolicyKind = "motioncache"
    alpha: float = Field(default=0.5, ge=0.0, le=1.0)
    tau: float = Field(default=0.1, gt=0.0)
    tau_chunk: float | None = Field(default=None, gt=0.0)
    full_computations: int = Field(default=6, ge=0)
    warmup: int = Field(default=4, ge=0)
    eps_num: float = Field(default=DEFAULT_EPS_NUM, gt=0.0)

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def chunk_threshold(self) -> float:
        return self.tau if self.tau_chunk is None else self.tau_chunk


@dataclass(frozen=True)
class StepDecision:
    """Outcome of the gate for one chunk step."""

    mode: DecisionMode
    mask: np.ndarray | None
    full_count: int
    phase: Phase
    chunk_accumulator: float = 0.0


class ResidualCache:
    """Per-token residual ``R = v - x`` with the step it was computed at.

    Entries start as NaN; reading a never-filled entry raises
    :class:`CacheStateError` in :func:`approximate_with_cache`.
    """

    def __init__(self, shape: tuple[int, ...]) -> None:
        self.residual = np.full(shape, np.nan, dtype=DTYPE)
        self.last_step = np.full(shape[:3], -1, dtype=np.int64)

    @property
    def filled(self) -> bool:
        return bool((self.last_step >= 0).all())

    def store(
        self, residual: np.ndarray, step: int, mask: np.ndarray | None = None
    ) -> None:
        """Store a full residual, or ``(N_active, C)`` rows when *mask* is set."""
        if mask is None:
            if residual.shape != self.residual.shape:
                raise ValueError(
                    f"residual shape {residual.shape} != cache {self.residual.shape}"
                )
            self.residual[...] = residual
            self.last_step[...] = step
            return
        flat = np.asarray(mask, dtype=bool).ravel()
        channels = self.residual.shape[-1]
        if residual.shape != (int(flat.sum()), channels):
            raise ValueError(
                f"sparse residual rows {residual.shape} do not match mask "
                f"with {int(flat.sum())} tokens"
            )
        self.residual.reshape(-1, channels)[flat] = residual
        self.last_step.reshape(-1)[flat] = step

    def retrieve(self) -> np.ndarray:
        return self.residual.copy()

    @property
    def nbytes(self) -> int:
        return int(self.residual.nbytes + self.last_step.nbytes)


def compute_residual(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Return the residual ``v - x``."""
    if v.shape != x.shape:
        raise ValueError(f"shape mismatch: v{v.shape} vs x{x.shape}")
    return np.asarray(v, dtype=DTYPE) - np.asarray(x, dtype=DTYPE)


def approximate_with_cache(x_next: np.ndarray, cached_r: np.ndarray) -> np.ndarray:
    """Approximate the velocity at a skipped step as ``x_next + R``.

    Raises
    ------
    ValueError
        If the shapes differ.
    CacheStateError
        If any cached entry was never filled.

    """
    if x_next.shape != cached_r.shape:
        raise ValueError(
            f"shape mismatch: x{x_next.shape} vs cached residual{cached_r.shape}"
        )
    if not np.all(np.isfinite(cached_r)):
        raise CacheStateError("residual cache holds never-filled entries")
    return np.asarray(x_next, dtype=DTYPE) + cached_r


def relative_l1(x_t: np.ndarray, x_prev: np.ndarray) -> float:
    """Relative L1 change ``|x_t - x_prev|_1 / |x_prev|_1``.

    A zero denominator yields ``inf`` (forcing a recomputation) and logs a
    warning.
    """
    if x_t.shape != x_prev.shape:
        raise ValueError(f"shape mismatch: {x_t.shape} vs {x_prev.shape}")
    denominator = float(np.abs(x_prev).sum())
    if denominator == 0.0:
        logger.warning("[relative_l1] zero reference norm; returning inf")
        return float("inf")
    return float(np.abs(x_t - x_prev).sum()) / denominator


def frame_differences(latent: np.ndarray) -> np.ndarray:
    """L1-over-channels difference of each frame to the one before it."""
    return np.abs(np.diff(np.asarray(latent, dtype=DTYPE), axis=0)).sum(axis=-1)


def importance_map(
    prev_latent: np.ndarray,
    prev_chunk_last_frame: np.ndarray | None,
    chunk_index: int,
    frames: int | None = None,
) -> np.ndarray:
    """Frame-difference importance ``M`` of shape ``(F, H, W)``.

    Parameters
    ----------
    prev_latent : np.ndarray
        The chunk's latent from the previous step, ``(F, H, W, C)``.
    prev_chunk_last_frame : np.ndarray or None
        Last frame ``(H, W, C)`` of the preceding chunk; required when
        ``chunk_index > 0``.
    chunk_index : int
        0-based chunk index.
    frames : int, optional
        Expected frame count, checked against *prev_latent*.

    Returns
    -------
    np.ndarray
        Frame ``f > 0`` differs against ``f - 1``; frame 0 differs against
        the preceding chunk, copies frame 1 in the first chunk, or is all
        ones for a single-frame first chunk.

    """
    latent = np.asarray(prev_latent, dtype=DTYPE)
    if latent.ndim != 4:
        raise ValueError(f"latent must be (F, H, W, C), got {latent.shape}")
    n_frames = latent.shape[0]
    if frames is not None and frames != n_frames:
        raise ValueError(f"expected {frames} frames, latent has {n_frames}")

    importance = np.empty(latent.shape[:3], dtype=DTYPE)
    if n_frames > 1:
        importance[1:] = frame_differences(latent)
    if chunk_index > 0:
        if prev_chunk_last_frame is None:
            raise ValueError(f"chunk {chunk_index} needs the previous chunk's frame")
        reference = np.asarray(prev_chunk_last_frame, dtype=DTYPE)
        if reference.shape != latent.shape[1:]:
            raise ValueError(
                f"reference frame {reference.shape} != frame {latent.shape[1:]}"
            )
        importance[0] = np.abs(latent[0] - reference).sum(axis=-1)
    elif n_frames > 1:
        importance[0] = importance[1]
    else:
        importance[0] = 1.0
    return importance


def soft_map(
    importance: np.ndarray, alpha: float, eps_num: float = DEFAULT_EPS_NUM
) -> np.ndarray:
    """Project importance linearly onto ``[alpha, 1]``, per frame.

    Min and max are taken over the last two axes (one frame); a 1-D input is
    normalized as a whole.
    """
    values = np.asarray(importance, dtype=DTYPE)
    if np.any(values < 0.0):
        raise ValueError("importance must be non-negative")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    axes = tuple(range(max(values.ndim - 2, 0), values.ndim))
    low = values.min(axis=axes, keepdims=True)
    high = values.max(axis=axes, keepdims=True)
    return alpha + (1.0 - alpha) * (values - low) / (high - low + eps_num)


def accumulate(acc: np.ndarray, weights: np.ndarray, delta: float) -> np.ndarray:
    """Add the weighted chunk change ``weights * delta`` to the accumulator."""
    if not delta >= 0.0:
        raise ValueError(f"delta must be non-negative, got {delta}")
    return acc + weights * delta


def threshold_mask(acc: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Select tokens with ``acc > tau`` and reset their accumulators."""
    if not tau > 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    mask = acc > tau
    return mask, np.where(mask, 0.0, acc)


def phase1_chunk_decision(
    chunk_accumulator: float,
    delta_chunk: float,
    tau_chunk: float,
    full_count: int,
    full_computations: int | None,
    step_in_window: int,
    warmup: int,
) -> StepDecision:
    """Chunk-wise gate used in warm-up and Phase 1.

    Warm-up steps always compute and do not count toward ``K``.  After
    warm-up the scalar accumulator grows by *delta_chunk*; crossing
    *tau_chunk* computes the whole chunk, resets the accumulator and bumps
    *full_count*.  ``full_computations=None`` keeps the gate open forever
    (the chunk-level baseline).
    """
    if step_in_window < warmup:
        return StepDecision(DecisionMode.FULL_COMPUTE, None, full_count, Phase.WARMUP)
    if full_computations is not None and full_count >= full_computations:
        raise ValueError(
            f"phase 1 already finished: full_count={full_count} "
            f"K={full_computations}"
        )
    if not delta_chunk >= 0.0:
        raise ValueError(f"delta must be non-negative, got {delta_chunk}")
    acc = chunk_accumulator + delta_chunk
    if acc > tau_chunk:
        return StepDecision(
            DecisionMode.FULL_COMPUTE, None, full_count + 1, Phase.PHASE1
        )
    return StepDecision(DecisionMode.FULL_SKIP, None, full_count, Phase.PHASE1, acc)


class ScenarioLike(Protocol):
    x_noise: np.ndarray


@dataclass
class _ChunkRun:
    """Mutable per-chunk state of the loop."""

    index: int
    start: int
    latent: np.ndarray
    cache: ResidualCache
    previous: np.ndarray | None = None
    token_kv: TokenKV | None = None
    full_count: int = 0
    chunk_acc: float = 0.0
    accumulator: np.ndarray | None = None
    steps_done: int = 0

    def nbytes(self, caches: bool) -> int:
        if not caches:
            return 0
        total = self.cache.nbytes
        if self.token_kv is not None:
            total += self.token_kv.keys.nbytes + self.token_kv.values.nbytes
        if self.accumulator is not None:
            total += self.accumulator.nbytes
        return total


@dataclass
class DenoiseResult:
    """Final latents, step records and bookkeeping of one policy run."""

    policy: PolicyConfig
    final: np.ndarray
    records: list[StepRecord]
    schedule: NoiseSchedule
    field_kind: str
    dims: ModelDims
    verbosity: Verbosity
    stale_kv: bool
    peak_memory_bytes: int = 0
    degenerate_chunks: list[int] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return bool(self.degenerate_chunks)

    @property
    def token_forwards(self) -> int:
        return sum(record.n_active for record in self.records)

    def to_trace(
        self, config_hash: str = "", scenario_hash: str = "", seed: int = 0
    ) -> RunTrace:
        """Wrap the run into a :class:`RunTrace` with a filled header."""
        chunks, f, h, w, c = self.final.shape
        header = TraceHeader(
            config_hash=config_hash,
            scenario_hash=scenario_hash,
            policy=self.policy.label,
            policy_kind=self.policy.kind,
            policy_params=self.policy.model_dump(mode="json"),
            seed=seed,
            chunks=chunks,
            shape=(f, h, w, c),
            total_steps=self.schedule.total_steps,
            window=self.schedule.window,
            dt=self.schedule.dt,
            field_kind=self.field_kind,
            stale_kv=self.stale_kv,
            verbosity=self.verbosity,
            model_dims=self.dims,
            degenerate=self.degenerate,
            peak_memory_bytes=self.peak_memory_bytes,
            record_count=len(self.records),
        )
        return RunTrace(header, self.records, self.final)


_Snapshot = dict[int, tuple[np.ndarray, "np.ndarray | None", int]]


def _reference_frame(
    index: int, snapshot: _Snapshot, finals: dict[int, np.ndarray]
) -> np.ndarray | None:
    """Last frame of chunk ``index - 1`` as of the previous step."""
    if index == 0:
        return None
    if index - 1 in finals:
        return finals[index - 1][-1]
    latent, previous, _ = snapshot[index - 1]
    return (previous if previous is not None else latent)[-1]


def _phase2_decision(
    policy: PolicyConfig, run: _ChunkRun, weights: np.ndarray, delta: float
) -> StepDecision:
    if run.accumulator is None:
        run.accumulator = np.full(weights.shape, run.chunk_acc, dtype=DTYPE)
    acc = accumulate(run.accumulator, weights, delta)
    mask, run.accumulator = threshold_mask(acc, policy.tau)
    if mask.all():
        return StepDecision(
            DecisionMode.FULL_COMPUTE, None, run.full_count, Phase.PHASE2
        )
    if not mask.any():
        return StepDecision(DecisionMode.FULL_SKIP, None, run.full_count, Phase.PHASE2)
    return StepDecision(DecisionMode.TOKEN_SPARSE, mask, run.full_count, Phase.PHASE2)


def _execute(
    velocity_field: VelocityField,
    run: _ChunkRun,
    decision: StepDecision,
    t: int,
    kv: KVCacheState,
    context: list[ContextChunk],
    stale_kv: bool,
) -> tuple[np.ndarray, int]:
    """Evaluate (or approximate) the velocity; return it and the active count."""
    x = run.latent
    chunk = LatentChunk(run.index, x, t)
    n_tokens = chunk.n_tokens
    step = run.steps_done

    if decision.mode is DecisionMode.FULL_SKIP:
        return approximate_with_cache(x, run.cache.retrieve()), 0

    fresh = velocity_field.project_kv(x, t) if velocity_field.uses_kv else None
    if decision.mode is DecisionMode.FULL_COMPUTE:
        velocity = velocity_field.eval_full(chunk, t, kv, context, token_kv=fresh)
        run.cache.store(compute_residual(velocity, x), step)
        run.token_kv = fresh
        return velocity, n_tokens

    mask = decision.mask
    assert mask is not None
    flat = mask.ravel()
    table = fresh
    if fresh is not None and stale_kv and run.token_kv is not None:
        table = run.token_kv.copy()
        table.keys[flat] = fresh.keys[flat]
        table.values[flat] = fresh.values[flat]
    rows = velocity_field.eval_sparse(chunk, t, mask, kv, context, token_kv=table)
    velocity = approximate_with_cache(x, run.cache.retrieve())
    channels = x.shape[-1]
    velocity.reshape(-1, channels)[flat] = rows
    run.cache.store(rows - x.reshape(-1, channels)[flat], step, mask)
    run.token_kv = table
    return velocity, int(flat.sum())


def run_denoise(
    policy: PolicyConfig,
    velocity_field: VelocityField,
    scenario: ScenarioLike,
    sched: NoiseSchedule,
    *,
    dims: ModelDims | None = None,
    verbosity: Verbosity = "decisions",
    stale_kv: bool = True,
) -> DenoiseResult:
    """Denoise every chunk of *scenario* from noise under *policy*.

    Chunk ``c`` starts at global tick ``sched.chunk_start(c)`` and takes
    exactly ``T`` Euler steps.  Within a tick, active chunks are processed
    in ascending order against the state they had at the start of the tick;
    a chunk's keys/values enter the KV cache once the tick that finished it
    is over.

    Parameters
    ----------
    policy : PolicyConfig
        Caching policy.
    velocity_field : VelocityField
        Backend evaluated on computed tokens.
    scenario : ScenarioLike
        Supplies ``x_noise`` of shape ``(chunks, F, H, W, C)``.
    sched : NoiseSchedule
        Steps per chunk and concurrency window.
    dims : ModelDims, optional
        Costed model dimensions for the FLOPs of each record.
    verbosity : {"decisions", "latents", "residuals"}
        Which tensor snapshots the records carry.
    stale_kv : bool
        Keep last-computed keys/values for skipped tokens on sparse steps.

    Returns
    -------
    DenoiseResult
        Final latents, records, degenerate chunks and peak cache memory.

    """
    dims = dims or ModelDims()
    noise = np.asarray(scenario.x_noise, dtype=DTYPE)
    if noise.ndim != 5:
        raise ValueError(f"x_noise must be (chunks, F, H, W, C), got {noise.shape}")
    chunks = noise.shape[0]
    grid_shape = noise.shape[1:]
    n_tokens = int(np.prod(grid_shape[:3]))
    total_steps = sched.total_steps
    warmup = max(policy.warmup, 1)
    caches = policy.kind != "vanilla"
    keep_latents = verbosity_at_least(verbosity, "latents")
    keep_residuals = verbosity_at_least(verbosity, "residuals")

    runs = [
        _ChunkRun(
            index=c,
            start=sched.chunk_start(c),
            latent=noise[c].copy(),
            cache=ResidualCache(grid_shape),
        )
        for c in range(chunks)
    ]
    finals: dict[int, np.ndarray] = {}
    kv = KVCacheState()
    records: list[StepRecord] = []
    step_acc = 0.0
    peak_memory = 0

    for tick in range(sched.horizon(chunks)):
        active = [run for run in runs if run.start <= tick < run.start + total_steps]
        snapshot: _Snapshot = {
            run.index: (run.latent, run.previous, run.steps_done) for run in active
        }

        tick_decision: StepDecision | None = None
        if policy.kind == "step-level":
            if any(run.steps_done < warmup for run in active):
                tick_decision = StepDecision(
                    DecisionMode.FULL_COMPUTE, None, 0, Phase.WARMUP
                )
            else:
                previous = [run.previous for run in active if run.previous is not None]
                step_acc += relative_l1(
                    np.concatenate([run.latent.ravel() for run in active]),
                    np.concatenate([latent.ravel() for latent in previous]),
                )
                if step_acc > policy.tau:
                    step_acc = 0.0
                    mode = DecisionMode.FULL_COMPUTE
                else:
                    mode = DecisionMode.FULL_SKIP
                tick_decision = StepDecision(mode, None, 0, Phase.STEP_GATE)

        finished: list[_ChunkRun] = []
        for run in active:
            step = run.steps_done
            t = total_steps - step
            x = run.latent
            delta = relative_l1(x, run.previous) if run.previous is not None else None

            weights = None
            if (
                policy.kind == "motioncache"
                and run.previous is not None
                and (run.full_count >= policy.full_computations or keep_latents)
            ):
                reference = _reference_frame(run.index, snapshot, finals)
                importance = importance_map(run.previous, reference, run.index)
                weights = soft_map(importance, policy.alpha, policy.eps_num)

            if policy.kind == "vanilla":
                decision = StepDecision(
                    DecisionMode.FULL_COMPUTE, None, 0, Phase.VANILLA
                )
            elif tick_decision is not None:
                decision = tick_decision
            elif step < warmup:
                decision = StepDecision(
                    DecisionMode.FULL_COMPUTE, None, run.full_count, Phase.WARMUP
                )
            elif policy.kind == "chunk-level" or (
                run.full_count < policy.full_computations
            ):
                assert delta is not None
                decision = phase1_chunk_decision(
                    run.chunk_acc,
                    delta,
                    policy.chunk_threshold,
                    run.full_count,
                    None if policy.kind == "chunk-level" else policy.full_computations,
                    step,
                    warmup,
                )
                run.chunk_acc = decision.chunk_accumulator
                run.full_count = decision.full_count
            else:
                assert delta is not None and weights is not None
                decision = _phase2_decision(policy, run, weights, delta)

            context: list[ContextChunk] = []
            if velocity_field.uses_kv:
                for earlier in active:
                    if earlier.index >= run.index:
                        break
                    latent, _, done = snapshot[earlier.index]
                    context.append(
                        ContextChunk(
                            LatentChunk(earlier.index, latent, total_steps - done)
                        )
                    )

            velocity, n_active = _execute(
                velocity_field, run, decision, t, kv, context, stale_kv
            )
            n_kv = n_tokens * (run.index + 1)
            tensors: dict[str, np.ndarray] = {}
            if keep_latents:
                tensors["latent"] = x.copy()
                if weights is not None:
                    tensors["weights"] = weights
            if keep_residuals:
                tensors["velocity"] = velocity.copy()
                tensors["residual"] = run.cache.retrieve()
            records.append(
                StepRecord(
                    chunk=run.index,
                    step=step,
                    t=t,
                    tick=tick,
                    mode=decision.mode,
                    phase=decision.phase,
                    delta=delta,
                    n_active=n_active,
                    n_tokens=n_tokens,
                    n_kv=n_kv,
                    flops=step_flops(n_active, n_kv, n_tokens - n_active, dims),
                    mask=decision.mask.copy() if decision.mask is not None else None,
                    tensors=tensors,
                )
            )
            logger.debug(
                "[run_denoise] policy=%s chunk=%d t=%d mode=%s active=%d",
                policy.label,
                run.index,
                t,
                decision.mode.label,
                n_active,
            )

            run.previous = x
            run.latent = euler_step(x, velocity, sched.dt)
            run.steps_done += 1
            if run.steps_done == total_steps:
                finished.append(run)

        peak_memory = max(
            peak_memory,
            kv.nbytes() + sum(run.nbytes(caches) for run in active),
        )
        for run in finished:
            finals[run.index] = run.latent
            final_chunk = LatentChunk(run.index, run.latent, 0)
            kv = finalize_chunk_kv(kv, final_chunk, velocity_field)

    degenerate = []
    if policy.kind == "motioncache":
        degenerate = [
            run.index for run in runs if run.full_count < policy.full_computations
        ]
        if degenerate:
            logger.warning(
                "[run_denoise] policy=%s phase 1 never completed for chunks=%s",
                policy.label,
                degenerate,
            )

    final = np.stack([finals[c] for c in range(chunks)])
    return DenoiseResult(
        policy=policy,
        final=final,
        records=records,
        schedule=sched,
        field_kind=velocity_field.kind,
        dims=dims,
        verbosity=verbosity,
        stale_kv=stale_kv,
        peak_memory_bytes=peak_memory,
        degenerate_chunks=degenerate,
    )
