"""Latent tensors, noise schedule and Euler integration for chunked denoising.

Every caching policy runs on the primitives in this module: the linear (or
shifted) noise schedule, the forward interpolation between data and noise,
the first-order Euler update and the sliding timestep window that lets
several autoregressive chunks denoise concurrently.

Chunks are indexed from 0 inside the engine.  :func:`chunk_window` keeps the
1-based convention of the windowing formula; :meth:`NoiseSchedule.chunk_start`
maps a 0-based chunk onto it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Literal, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64
"""Floating point type used for every tensor in the engine."""


class CacheStateError(RuntimeError):
    """Raised when cached state is missing, stale or used out of order."""


class InsufficientDataError(ValueError):
    """Raised when an analysis has too few samples to be meaningful."""


def _check_finite(name: str, array: np.ndarray) -> None:
    """Raise ``FloatingPointError`` when *array* holds NaN or infinity."""
    if not np.all(np.isfinite(array)):
        raise FloatingPointError(f"{name} contains non-finite values")


def _check_same_shape(
    a: np.ndarray, b: np.ndarray, names: tuple[str, str] = ("a", "b")
) -> None:
    if a.shape != b.shape:
        raise ValueError(
            f"shape mismatch: {names[0]}{a.shape} vs {names[1]}{b.shape}"
        )


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete timestep grid ``t = T .. 0`` with a monotone ``sigma``.

    Attributes
    ----------
    total_steps : int
        Number of Euler steps ``T`` per chunk.
    window : int
        Maximum number of chunks denoised concurrently (``l``).
    kind : {"linear", "shifted"}
        ``linear`` gives ``sigma(t) = t / T``; ``shifted`` applies the
        flow-matching time shift ``s * sigma / (1 + (s - 1) * sigma)``.
    shift : float
        Shift factor used when ``kind == "shifted"``.

    """

    total_steps: int
    window: int = 1
    kind: Literal["linear", "shifted"] = "linear"
    shift: float = 1.0

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.window > self.total_steps:
            raise ValueError(
                f"window={self.window} exceeds total_steps={self.total_steps}"
            )
        if self.kind not in ("linear", "shifted"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.shift > 0.0:
            raise ValueError(f"shift must be positive, got {self.shift}")
        logger.debug(
            "[NoiseSchedule] T=%d window=%d kind=%s shift=%s",
            self.total_steps,
            self.window,
            self.kind,
            self.shift,
        )

    @property
    def step_size(self) -> float:
        """Magnitude of one normalized step, ``1 / T``."""
        return 1.0 / self.total_steps

    @property
    def dt(self) -> float:
        """Signed step handed to :func:`euler_step` (time runs ``T -> 0``)."""
        return -1.0 / self.total_steps

    def sigma(self, t: int) -> float:
        """Return the noise level for timestep *t* in ``[0, T]``."""
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"timestep t={t} outside [0, {self.total_steps}]")
        base = t / self.total_steps
        if self.kind == "shifted":
            return self.shift * base / (1.0 + (self.shift - 1.0) * base)
        return base

    def timesteps(self) -> list[int]:
        """Input timesteps of one chunk window, in processing order."""
        return list(range(self.total_steps, 0, -1))

    def chunk_start(self, chunk: int) -> int:
        """Global tick at which 0-based *chunk* performs its first step."""
        if chunk < 0:
            raise ValueError(f"chunk must be >= 0, got {chunk}")
        return -(-chunk * self.total_steps // self.window)

    def horizon(self, chunks: int) -> int:
        """Number of global ticks needed to finish *chunks* chunks."""
        if chunks < 1:
            raise ValueError(f"chunks must be >= 1, got {chunks}")
        return self.chunk_start(chunks - 1) + self.total_steps


@dataclass(frozen=True)
class LatentChunk:
    """One chunk's latent tensor ``X_t^i`` of shape ``(F, H, W, C)``.

    The tensor is copied on construction and marked read-only, so a chunk
    can be shared freely; :meth:`advance` returns a new chunk.
    """

    chunk_index: int
    data: np.ndarray
    current_timestep: int

    def __post_init__(self) -> None:
        if self.chunk_index < 0:
            raise ValueError(f"chunk_index must be >= 0, got {self.chunk_index}")
        if self.current_timestep < 0:
            raise ValueError(
                f"current_timestep must be >= 0, got {self.current_timestep}"
            )
        data = np.array(self.data, dtype=DTYPE, copy=True)
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"latent must have shape (F, H, W, C), got {data.shape}")
        _check_finite("latent", data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        f, h, w, c = self.data.shape
        return f, h, w, c

    @property
    def n_tokens(self) -> int:
        f, h, w, _ = self.shape
        return f * h * w

    def tokens(self) -> np.ndarray:
        """Flat ``(N, C)`` view of the latent in token order."""
        return self.data.reshape(self.n_tokens, self.shape[3])

    def advance(self, data: np.ndarray, timestep: int) -> LatentChunk:
        """Return a chunk with the same index holding *data* at *timestep*."""
        if data.shape != self.data.shape:
            raise ValueError(
                f"latent shape changed from {self.data.shape} to {data.shape}"
            )
        return LatentChunk(self.chunk_index, data, timestep)


@dataclass(frozen=True)
class TokenIndex:
    """Spatio-temporal address ``(f, h, w)`` of one token."""

    f: int
    h: int
    w: int


def _grid(shape: Sequence[int]) -> tuple[int, int, int]:
    if len(shape) < 3:
        raise ValueError(f"shape needs at least (F, H, W), got {tuple(shape)}")
    f, h, w = (int(v) for v in shape[:3])
    if min(f, h, w) < 1:
        raise ValueError(f"shape dimensions must be >= 1, got {tuple(shape)}")
    return f, h, w


def token_flatten(idx: TokenIndex | tuple[int, int, int], shape: Sequence[int]) -> int:
    """Map ``(f, h, w)`` to the flat token index ``f*H*W + h*W + w``."""
    f_dim, h_dim, w_dim = _grid(shape)
    f, h, w = (idx.f, idx.h, idx.w) if isinstance(idx, TokenIndex) else idx
    if not (0 <= f < f_dim and 0 <= h < h_dim and 0 <= w < w_dim):
        raise ValueError(f"token {(f, h, w)} outside grid {(f_dim, h_dim, w_dim)}")
    return (f * h_dim + h) * w_dim + w


def token_unflatten(p: int, shape: Sequence[int]) -> TokenIndex:
    """Inverse of :func:`token_flatten`."""
    f_dim, h_dim, w_dim = _grid(shape)
    if not 0 <= p < f_dim * h_dim * w_dim:
        raise ValueError(f"flat index {p} outside [0, {f_dim * h_dim * w_dim})")
    f, rest = divmod(p, h_dim * w_dim)
    h, w = divmod(rest, w_dim)
    return TokenIndex(f, h, w)


def forward_interpolate(
    x_data: np.ndarray, x_noise: np.ndarray, t: int, sched: NoiseSchedule
) -> np.ndarray:
    """Return ``(1 - sigma(t)) * x_data + sigma(t) * x_noise``.

    The endpoints are returned as copies so ``t = 0`` and ``t = T`` are exact.
    """
    _check_same_shape(x_data, x_noise, ("x_data", "x_noise"))
    s = sched.sigma(t)
    if s == 0.0:
        return np.array(x_data, dtype=DTYPE, copy=True)
    if s == 1.0:
        return np.array(x_noise, dtype=DTYPE, copy=True)
    return (1.0 - s) * np.asarray(x_data, dtype=DTYPE) + s * np.asarray(
        x_noise, dtype=DTYPE
    )


def euler_step(x: np.ndarray, v: np.ndarray, dt: float) -> np.ndarray:
    """Advance *x* by one explicit Euler step, ``x + v * dt``.

    Raises
    ------
    ValueError
        If *x* and *v* differ in shape.
    FloatingPointError
        If *x*, *v* or *dt* is not finite.

    """
    x = np.asarray(x, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    _check_same_shape(x, v, ("x", "v"))
    if not math.isfinite(dt):
        raise FloatingPointError(f"dt must be finite, got {dt}")
    _check_finite("x", x)
    _check_finite("v", v)
    return x + v * dt


def chunk_window(
    i: int, total_steps: int, window: int, horizon: int | None = None
) -> tuple[int, int]:
    """Timestep interval during which 1-based chunk *i* is denoised.

    The analytic window is ``[(i-1)T/l, (i+l-1)T/l]``.  It is clipped to
    ``[0, horizon]`` (``horizon`` defaults to ``T``) and fractional bounds
    are rounded toward the interior.

    Parameters
    ----------
    i : int
        Chunk number, starting at 1.
    total_steps : int
        Steps per chunk ``T``.
    window : int
        Concurrency window ``l``.
    horizon : int or None
        Upper clip bound, ``T`` when omitted.

    Returns
    -------
    tuple[int, int]
        Closed interval ``(t_start, t_end)``.

    """
    if total_steps < 1:
        raise ValueError(f"T must be >= 1, got {total_steps}")
    if window < 1:
        raise ValueError(f"l must be >= 1, got {window}")
    if window > total_steps:
        raise ValueError(f"l={window} exceeds T={total_steps}")
    if i < 1:
        raise ValueError(f"chunk number i must be >= 1, got {i}")

    lower = Fraction((i - 1) * total_steps, window)
    upper = Fraction((i + window - 1) * total_steps, window)
    start = max(0, math.ceil(lower))
    end = math.floor(upper)
    bound = total_steps if horizon is None else horizon
    end = min(end, bound)
    if end < start:
        raise ValueError(f"chunk {i} lies beyond horizon {bound}")
    return start, end
