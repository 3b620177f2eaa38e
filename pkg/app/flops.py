"""FLOPs cost model of a dense transformer block, per denoising step.

Counts follow the usual dense accounting with one multiply-accumulate
counted as two FLOPs:

* attention (scores and weighted sum): ``4 * N_q * N_kv * d``
* attention GEMMs (Q, K, V and output projections): ``8 * N_q * d**2``
* FFN GEMMs (two layers): ``4 * N_q * d * d_ffn``

Tokens that reuse a cached residual cost one addition per channel, which is
booked in a separate ``reuse`` category.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

import pandas as pd
from pydantic import BaseModel, Field

if TYPE_CHECKING:
    from app.trace import RunTrace

CATEGORIES = ("attention", "attention_gemm", "ffn_gemm", "reuse")
"""Ledger categories, in report order."""

COMPUTE_CATEGORIES = CATEGORIES[:3]
"""Categories that count model evaluation work."""


class ModelDims(BaseModel):
    """Pydantic model for the costed transformer dimensions."""

    width: int = Field(default=8, ge=1)
    ffn_width: int = Field(default=16, ge=1)


@dataclass(frozen=True)
class FlopCounts:
    """FLOPs of one step (or an aggregate of steps) by category."""

    attention: int = 0
    attention_gemm: int = 0
    ffn_gemm: int = 0
    reuse: int = 0

    def __add__(self, other: FlopCounts) -> FlopCounts:
        return FlopCounts(
            self.attention + other.attention,
            self.attention_gemm + other.attention_gemm,
            self.ffn_gemm + other.ffn_gemm,
            self.reuse + other.reuse,
        )

    @property
    def compute(self) -> int:
        return self.attention + self.attention_gemm + self.ffn_gemm

    @property
    def total(self) -> int:
        return self.compute + self.reuse

    def as_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in CATEGORIES}


def step_flops(n_active: int, n_kv: int, n_reused: int, dims: ModelDims) -> FlopCounts:
    """FLOPs of one step with *n_active* query tokens over *n_kv* keys.

    Raises
    ------
    ValueError
        If any count is negative.

    """
    if min(n_active, n_kv, n_reused) < 0:
        raise ValueError(
            f"token counts must be non-negative: active={n_active} "
            f"kv={n_kv} reused={n_reused}"
        )
    d = dims.width
    return FlopCounts(
        attention=4 * n_active * n_kv * d,
        attention_gemm=8 * n_active * d * d,
        ffn_gemm=4 * n_active * d * dims.ffn_width,
        reuse=n_reused * d,
    )


@dataclass
class FlopsLedger:
    """Per-step FLOPs of one policy run, keyed by ``(chunk, step)``."""

    policy: str
    dims: ModelDims
    steps: list[tuple[int, int, FlopCounts]]

    @property
    def total(self) -> FlopCounts:
        return sum_counts(counts for _, _, counts in self.steps)

    def per_chunk(self) -> dict[int, FlopCounts]:
        totals: dict[int, FlopCounts] = defaultdict(FlopCounts)
        for chunk, _, counts in self.steps:
            totals[chunk] = totals[chunk] + counts
        return dict(totals)

    def dominates(self, other: FlopsLedger) -> bool:
        """``True`` when no compute category spends less than *other*."""
        mine, theirs = self.total, other.total
        return all(getattr(mine, c) >= getattr(theirs, c) for c in COMPUTE_CATEGORIES)

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"policy": self.policy, "chunk": chunk, "step": step, **counts.as_dict()}
            for chunk, step, counts in self.steps
        ]
        frame = pd.DataFrame(rows, columns=["policy", "chunk", "step", *CATEGORIES])
        frame["total"] = frame[list(CATEGORIES)].sum(axis=1)
        return frame


def sum_counts(items: Iterable[FlopCounts]) -> FlopCounts:
    total = FlopCounts()
    for item in items:
        total = total + item
    return total


def flops_account(trace: RunTrace, dims: ModelDims | None = None) -> FlopsLedger:
    """Re-derive the FLOPs ledger of a run from its recorded step decisions.

    Parameters
    ----------
    trace : RunTrace
        Trace whose records carry active, token and key counts.
    dims : ModelDims, optional
        Costed dimensions; the trace header's dimensions by default.

    Returns
    -------
    FlopsLedger
        One entry per recorded step.

    """
    dims = dims or trace.header.model_dims
    steps = [
        (
            record.chunk,
            record.step,
            step_flops(
                record.n_active, record.n_kv, record.n_tokens - record.n_active, dims
            ),
        )
        for record in trace.records
    ]
    return FlopsLedger(trace.header.policy, dims, steps)
