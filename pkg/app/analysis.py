"""Analyses over run traces: error identity, motion proxy, quality, statistics.

* :func:`prop1_check` compares the exact and cache-approximated Euler
  outputs of consecutive steps against ``|dt| * |R_t - R_{t+1}|_2``.
* :func:`lemma_check` pairs each token's residual change with its
  intra-chunk frame difference and fits the bounding constant.
* :func:`ranking_check` scores the frame-difference ranking of tokens
  against the residual-change ranking with NDCG.
* :func:`quality_metrics`, :func:`residual_distribution`,
  :func:`weight_localization` and :func:`open_loop_crossings` report on
  outputs, residual statistics and accumulator behaviour.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Iterator, Literal, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from skimage.metrics import mean_squared_error, structural_similarity

from app.core import CacheStateError, InsufficientDataError, euler_step
from app.policies import approximate_with_cache, frame_differences
from app.trace import DecisionMode, Phase, RunTrace, StepRecord

logger = logging.getLogger(__name__)

PROP1_TOLERANCE = 1e-9
"""Maximum relative violation of the local error identity."""

DEGENERATE_RATIO = 1e-6
"""Samples with ``eps < DEGENERATE_RATIO * |X|`` are checked absolutely."""

DEGENERATE_TOLERANCE = 1e-13
"""Absolute tolerance, relative to ``|X|``, for degenerate samples."""

MIN_LEMMA_SAMPLES = 10
"""Fewest token samples a lemma fit accepts."""

DEFAULT_SLACK = 1e-12
"""Absolute slack subtracted before fitting the bounding constant."""

SSIM_WINDOW = 7
"""Side of the uniform SSIM window (clipped to the frame size)."""

_TINY = 1e-300


@dataclass
class ErrorReport:
    """Local approximation error samples and identity violations.

    ``samples`` has one row per chunk group and per frame group with columns
    ``chunk, step, t, group, frame, epsilon, predicted, scale, degenerate,
    violation``.  Token-level violations are folded into the maxima.
    """

    samples: pd.DataFrame
    max_relative_violation: float
    max_degenerate_violation: float
    token_max_relative_violation: float

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def passed(self) -> bool:
        return (
            self.max_relative_violation <= PROP1_TOLERANCE
            and self.token_max_relative_violation <= PROP1_TOLERANCE
            and self.max_degenerate_violation <= DEGENERATE_TOLERANCE
        )


@dataclass
class LemmaReport:
    """Paired residual-change / frame-difference samples and their fit."""

    samples: pd.DataFrame
    constant: float
    slope: float
    spearman: float
    holds_fraction: float

    @property
    def n_samples(self) -> int:
        return len(self.samples)


@dataclass
class RankingReport:
    """Per-step NDCG of the proxy ranking and of random rankings."""

    samples: pd.DataFrame

    @property
    def mean_ndcg(self) -> float:
        return float(self.samples["ndcg"].mean())

    @property
    def mean_random(self) -> float:
        return float(self.samples["random_ndcg"].mean())

    @property
    def margin(self) -> float:
        return self.mean_ndcg - self.mean_random


@dataclass(frozen=True)
class QualityReport:
    mse: float
    psnr: float
    ssim: float

    def as_dict(self) -> dict[str, float]:
        return {"mse": self.mse, "psnr": self.psnr, "ssim": self.ssim}


@dataclass
class DistributionStats:
    """Token-wise ``|R_t - R_{t+1}|_2`` summaries by step and by frame."""

    per_step: pd.DataFrame
    per_frame: pd.DataFrame
    overall: dict[str, float]


def _require_tensors(trace: RunTrace, names: Sequence[str], error: type) -> None:
    missing = [name for name in names if not trace.has_tensor(name)]
    if missing:
        raise error(
            f"trace of policy {trace.header.policy!r} lacks tensors {missing}; "
            "record it with verbosity 'residuals'"
        )


def _computed_pairs(trace: RunTrace) -> Iterator[tuple[StepRecord, StepRecord]]:
    """Consecutive step pairs where both steps evaluated the whole chunk."""
    for previous, current in trace.consecutive_pairs():
        if (
            previous.mode is DecisionMode.FULL_COMPUTE
            and current.mode is DecisionMode.FULL_COMPUTE
        ):
            yield previous, current


def _motion_pairs(trace: RunTrace) -> Iterator[tuple[StepRecord, StepRecord]]:
    """Computed pairs whose earlier latent is past the initial noise.

    The step-0 latent is the noise endpoint, whose frames can coincide when
    the scenario shares noise across a chunk, so it carries no motion cue.
    """
    for previous, current in _computed_pairs(trace):
        if previous.step >= 1:
            yield previous, current


def _summary(values: np.ndarray) -> dict[str, float]:
    return {
        "median": float(np.median(values)),
        "p90": float(np.quantile(values, 0.90)),
        "p99": float(np.quantile(values, 0.99)),
        "max": float(values.max()),
        "mean": float(values.mean()),
    }


# ── local error identity ───────────────────────────────────────────── #


def local_error(
    x: np.ndarray, r_true: np.ndarray, r_cached: np.ndarray, dt: float
) -> tuple[float, float]:
    """Return ``(eps, |dt| * |r_true - r_cached|_2)`` for one step.

    ``eps`` is the distance between the Euler outputs driven by
    ``x + r_true`` and by the cached ``x + r_cached``.
    """
    exact = euler_step(x, approximate_with_cache(x, r_true), dt)
    approx = euler_step(x, approximate_with_cache(x, r_cached), dt)
    eps = float(np.linalg.norm(exact - approx))
    return eps, abs(dt) * float(np.linalg.norm(r_true - r_cached))


def _violations(
    eps: np.ndarray, predicted: np.ndarray, scale: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    degenerate = eps < DEGENERATE_RATIO * scale
    gap = np.abs(eps - predicted)
    violation = np.where(
        degenerate, gap / np.maximum(scale, _TINY), gap / np.maximum(eps, _TINY)
    )
    return degenerate, violation


def prop1_check(trace: RunTrace) -> ErrorReport:
    """Verify the local error identity on every consecutive computed pair.

    For step ``s`` the exact output uses the recorded velocity; the cached
    output reuses the residual stored at step ``s - 1``.

    Raises
    ------
    ValueError
        If the trace lacks latents, velocities or residuals, or holds no
        consecutive computed pairs.

    """
    _require_tensors(trace, ("latent", "velocity", "residual"), ValueError)
    dt = trace.header.dt
    rows: list[dict] = []
    token_worst = 0.0
    degenerate_worst = 0.0

    for previous, current in _computed_pairs(trace):
        x = current.tensors["latent"]
        exact = euler_step(x, current.tensors["velocity"], dt)
        cached = approximate_with_cache(x, previous.tensors["residual"])
        diff = exact - euler_step(x, cached, dt)
        drift = current.tensors["residual"] - previous.tensors["residual"]

        token_eps = np.linalg.norm(diff, axis=-1)
        token_pred = abs(dt) * np.linalg.norm(drift, axis=-1)
        token_scale = np.linalg.norm(x, axis=-1)
        degenerate, violation = _violations(token_eps, token_pred, token_scale)
        if (~degenerate).any():
            token_worst = max(token_worst, float(violation[~degenerate].max()))
        if degenerate.any():
            degenerate_worst = max(degenerate_worst, float(violation[degenerate].max()))

        groups = [("chunk", -1, diff, drift, x)]
        groups += [
            ("frame", f, diff[f], drift[f], x[f]) for f in range(diff.shape[0])
        ]
        for group, frame, d, r, xs in groups:
            rows.append(
                {
                    "chunk": current.chunk,
                    "step": current.step,
                    "t": current.t,
                    "group": group,
                    "frame": frame,
                    "epsilon": float(np.linalg.norm(d)),
                    "predicted": abs(dt) * float(np.linalg.norm(r)),
                    "scale": float(np.linalg.norm(xs)),
                }
            )

    if not rows:
        raise ValueError("trace holds no consecutive fully computed steps")
    samples = pd.DataFrame(rows)
    degenerate, violation = _violations(
        samples["epsilon"].to_numpy(),
        samples["predicted"].to_numpy(),
        samples["scale"].to_numpy(),
    )
    samples["degenerate"] = degenerate
    samples["violation"] = violation
    relative = violation[~degenerate]
    if degenerate.any():
        degenerate_worst = max(degenerate_worst, float(violation[degenerate].max()))
    report = ErrorReport(
        samples=samples,
        max_relative_violation=float(relative.max()) if relative.size else 0.0,
        max_degenerate_violation=degenerate_worst,
        token_max_relative_violation=token_worst,
    )
    logger.info(
        "[prop1_check] policy=%s samples=%d max_rel=%.3e degenerate=%d",
        trace.header.policy,
        report.n_samples,
        report.max_relative_violation,
        int(degenerate.sum()),
    )
    return report


# ── motion proxy ───────────────────────────────────────────────────── #


def lemma_check(trace: RunTrace, slack: float = DEFAULT_SLACK) -> LemmaReport:
    """Pair ``|R_t - R_{t+1}|_2`` with ``|X^f - X^{f-1}|_2`` per token.

    Frames ``f >= 1`` of every chunk are sampled, with ``X`` taken at the
    earlier step of each pair; pairs starting at the noise endpoint are
    skipped.  The fitted constant is the smallest ``C`` with
    ``lhs <= C * rhs + slack`` on every sample, and a zero frame difference
    only ever admits ``lhs <= slack``.

    Raises
    ------
    CacheStateError
        If the trace lacks latents or residuals.
    InsufficientDataError
        If fewer than ten samples are available.

    """
    _require_tensors(trace, ("latent", "residual"), CacheStateError)
    chunks, steps, frames, lhs_parts, rhs_parts = [], [], [], [], []
    for previous, current in _motion_pairs(trace):
        latent = previous.tensors["latent"]
        if latent.shape[0] < 2:
            continue
        drift = current.tensors["residual"] - previous.tensors["residual"]
        lhs = np.linalg.norm(drift[1:], axis=-1)
        rhs = np.linalg.norm(latent[1:] - latent[:-1], axis=-1)
        lhs_parts.append(lhs.ravel())
        rhs_parts.append(rhs.ravel())
        frame_ids = np.broadcast_to(
            np.arange(1, latent.shape[0])[:, None, None], lhs.shape
        )
        frames.append(frame_ids.ravel())
        chunks.append(np.full(lhs.size, current.chunk))
        steps.append(np.full(lhs.size, current.step))

    n = int(sum(part.size for part in lhs_parts))
    if n < MIN_LEMMA_SAMPLES:
        raise InsufficientDataError(
            f"lemma fit needs >= {MIN_LEMMA_SAMPLES} samples, got {n}"
        )
    lhs_all = np.concatenate(lhs_parts)
    rhs_all = np.concatenate(rhs_parts)
    samples = pd.DataFrame(
        {
            "chunk": np.concatenate(chunks),
            "step": np.concatenate(steps),
            "frame": np.concatenate(frames),
            "residual_change": lhs_all,
            "frame_difference": rhs_all,
        }
    )

    positive = rhs_all > 0.0
    unbounded = (~positive) & (lhs_all > slack)
    if unbounded.any():
        constant = float("inf")
    elif positive.any():
        ratios = (lhs_all[positive] - slack) / rhs_all[positive]
        constant = max(0.0, float(ratios.max()))
    else:
        constant = 0.0
    denominator = float(np.dot(rhs_all, rhs_all))
    slope = float(np.dot(lhs_all, rhs_all)) / denominator if denominator else 0.0
    bound = np.full(lhs_all.shape, slack)
    bound[positive] += constant * rhs_all[positive]
    holds = lhs_all <= bound
    spearman = float(stats.spearmanr(lhs_all, rhs_all).statistic)
    report = LemmaReport(samples, constant, slope, spearman, float(holds.mean()))
    logger.info(
        "[lemma_check] samples=%d C=%.4g slope=%.4g spearman=%.3f",
        n,
        constant,
        slope,
        spearman,
    )
    return report


def ndcg(proxy: np.ndarray, oracle: np.ndarray, k: int | None = None) -> float:
    """NDCG of ranking tokens by *proxy* with graded relevance *oracle*.

    Ties in *proxy* keep flat-index order.  Discount is ``log2(rank + 1)``.
    An all-zero oracle scores 1.

    Raises
    ------
    ValueError
        On empty or mismatched inputs, negative relevance, or ``k < 1``.

    """
    proxy = np.asarray(proxy, dtype=np.float64).ravel()
    oracle = np.asarray(oracle, dtype=np.float64).ravel()
    if proxy.size == 0 or proxy.shape != oracle.shape:
        raise ValueError(
            f"proxy and oracle need equal non-zero length: {proxy.size} vs "
            f"{oracle.size}"
        )
    if np.any(oracle < 0.0):
        raise ValueError("oracle relevance must be non-negative")
    if k is not None and k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    depth = proxy.size if k is None else min(k, proxy.size)
    discount = 1.0 / np.log2(np.arange(2, depth + 2))
    order = np.argsort(-proxy, kind="stable")[:depth]
    ideal = float(oracle[np.argsort(-oracle, kind="stable")][:depth] @ discount)
    if ideal == 0.0:
        return 1.0
    return float(oracle[order] @ discount) / ideal


def random_ndcg_baseline(
    oracle: np.ndarray,
    permutations: int = 100,
    seed: int | np.random.Generator = 0,
    k: int | None = None,
) -> np.ndarray:
    """NDCG of *permutations* uniformly random rankings of *oracle*."""
    oracle = np.asarray(oracle, dtype=np.float64).ravel()
    if permutations < 1:
        raise ValueError(f"permutations must be >= 1, got {permutations}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    depth = oracle.size if k is None else min(k, oracle.size)
    discount = 1.0 / np.log2(np.arange(2, depth + 2))
    ideal = float(oracle[np.argsort(-oracle, kind="stable")][:depth] @ discount)
    if ideal == 0.0:
        return np.ones(permutations)
    orders = np.argsort(rng.random((permutations, oracle.size)), axis=1)[:, :depth]
    return (oracle[orders] @ discount) / ideal


def ranking_check(
    trace: RunTrace,
    permutations: int = 100,
    seed: int = 0,
    k: int | None = None,
    proxy: Literal["frame-difference", "oracle"] = "frame-difference",
) -> RankingReport:
    """NDCG of the frame-difference proxy at every computed pair past step 0.

    ``proxy="oracle"`` ranks by the oracle itself, which must score 1.
    """
    _require_tensors(trace, ("latent", "residual"), CacheStateError)
    rng = np.random.default_rng(seed)
    rows = []
    for previous, current in _motion_pairs(trace):
        latent = previous.tensors["latent"]
        if latent.shape[0] < 2:
            continue
        drift = current.tensors["residual"] - previous.tensors["residual"]
        relevance = np.linalg.norm(drift[1:], axis=-1).ravel()
        scores = relevance if proxy == "oracle" else frame_differences(latent).ravel()
        rows.append(
            {
                "chunk": current.chunk,
                "step": current.step,
                "t": current.t,
                "ndcg": ndcg(scores, relevance, k),
                "random_ndcg": float(
                    random_ndcg_baseline(relevance, permutations, rng, k).mean()
                ),
            }
        )
    if not rows:
        raise InsufficientDataError("no consecutive computed steps with frames >= 2")
    return RankingReport(pd.DataFrame(rows))


# ── outputs and statistics ────────────────────────────────────────── #


def quality_metrics(a: np.ndarray, b: np.ndarray, data_range: float) -> QualityReport:
    """MSE, PSNR and mean per-frame SSIM between two videos.

    Inputs are ``(..., H, W, C)``; leading axes are flattened into frames.
    SSIM uses a uniform 7x7 window (shrunk to the largest odd size that fits
    small frames) with constants scaled by *data_range*.  PSNR is ``inf``
    when the videos are identical.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim < 3:
        raise ValueError(f"expected (..., H, W, C), got {a.shape}")
    if not data_range > 0.0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    height, width, channels = a.shape[-3:]
    window = min(SSIM_WINDOW, height, width)
    window -= 1 - window % 2
    if window < 3:
        raise ValueError(f"frames of {height}x{width} are too small for SSIM")

    mse = float(mean_squared_error(a, b))
    psnr = float("inf") if mse == 0.0 else float(10.0 * np.log10(data_range**2 / mse))
    frames_a = a.reshape(-1, height, width, channels)
    frames_b = b.reshape(-1, height, width, channels)
    ssim = float(
        np.mean(
            [
                structural_similarity(
                    fa, fb, win_size=window, data_range=data_range, channel_axis=-1
                )
                for fa, fb in zip(frames_a, frames_b)
            ]
        )
    )
    return QualityReport(mse, psnr, ssim)


def residual_distribution(trace: RunTrace) -> DistributionStats:
    """Distribution of token-wise residual change between adjacent steps.

    Raises
    ------
    CacheStateError
        If residuals were not recorded.

    """
    _require_tensors(trace, ("residual",), CacheStateError)
    step_rows = []
    by_frame: dict[tuple[int, int], list[np.ndarray]] = {}
    pooled = []
    for previous, current in trace.consecutive_pairs():
        if "residual" not in previous.tensors or "residual" not in current.tensors:
            continue
        change = np.linalg.norm(
            current.tensors["residual"] - previous.tensors["residual"], axis=-1
        )
        pooled.append(change.ravel())
        step_rows.append(
            {"chunk": current.chunk, "step": current.step, "t": current.t}
            | _summary(change)
        )
        for f in range(change.shape[0]):
            by_frame.setdefault((current.chunk, f), []).append(change[f].ravel())
    if not pooled:
        raise InsufficientDataError("trace holds no consecutive residual snapshots")
    frame_rows = [
        {"chunk": chunk, "frame": f} | _summary(np.concatenate(parts))
        for (chunk, f), parts in sorted(by_frame.items())
    ]
    return DistributionStats(
        per_step=pd.DataFrame(step_rows),
        per_frame=pd.DataFrame(frame_rows),
        overall=_summary(np.concatenate(pooled)),
    )


def weight_localization(trace: RunTrace, motion_masks: np.ndarray) -> pd.DataFrame:
    """Mean weight inside vs outside the ground-truth motion mask per step.

    *motion_masks* is ``(chunks * F, H, W)``.  Only records carrying a
    ``weights`` tensor contribute.
    """
    _require_tensors(trace, ("weights",), CacheStateError)
    frames = trace.header.shape[0]
    rows = []
    for record in trace.records:
        weights = record.tensors.get("weights")
        if weights is None:
            continue
        mask = motion_masks[record.chunk * frames : (record.chunk + 1) * frames]
        inside = weights[mask]
        outside = weights[~mask]
        rows.append(
            {
                "chunk": record.chunk,
                "step": record.step,
                "t": record.t,
                "phase": record.phase.label,
                "inside_mean": float(inside.mean()) if inside.size else np.nan,
                "outside_mean": float(outside.mean()) if outside.size else np.nan,
            }
        )
    return pd.DataFrame(rows)


def accumulation_inputs(trace: RunTrace) -> dict[int, list[tuple[np.ndarray, float]]]:
    """Recorded Phase-2 ``(weights, delta)`` pairs of every chunk."""
    inputs: dict[int, list[tuple[np.ndarray, float]]] = {}
    for record in trace.records:
        weights = record.tensors.get("weights")
        if record.phase is Phase.PHASE2 and weights is not None:
            if record.delta is None:
                continue
            inputs.setdefault(record.chunk, []).append((weights, record.delta))
    return inputs


def open_loop_crossings(
    weights: Sequence[np.ndarray], deltas: Sequence[float], tau: float
) -> np.ndarray:
    """Replay a fixed ``(W, delta)`` sequence and count crossings per token."""
    if len(weights) != len(deltas):
        raise ValueError(f"{len(weights)} weight maps but {len(deltas)} deltas")
    if not tau > 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not weights:
        return np.zeros(0, dtype=np.int64)
    acc = np.zeros_like(weights[0], dtype=np.float64)
    counts = np.zeros(acc.shape, dtype=np.int64)
    for w, delta in zip(weights, deltas):
        acc = acc + w * delta
        crossed = acc > tau
        acc[crossed] = 0.0
        counts += crossed
    return counts


def motion_cue_cost(latent: np.ndarray, repeats: int = 20) -> dict[str, float]:
    """Wall-clock cost of the frame-difference cue on one chunk latent."""
    latent = np.asarray(latent, dtype=np.float64)
    start = time.perf_counter()
    for _ in range(repeats):
        frame_differences(latent)
    elapsed = (time.perf_counter() - start) / repeats
    pairs = max(latent.shape[0] - 1, 1)
    return {"seconds_per_call": elapsed, "seconds_per_frame_pair": elapsed / pairs}
