"""Velocity fields ``v(x, t)`` used by the denoising loop.

Three backends share the :class:`VelocityField` interface:

* :class:`RectifiedOracleField` returns ``x_noise - x_data`` for the chunk,
  so ideal trajectories are straight lines.
* :class:`LinearField` evaluates ``A @ x + b`` per token.
* :class:`ToyAttentionField` is a single-head attention block with a small
  MLP head, a sinusoidal time embedding and a real key/value cache, which is
  what makes the sparse token-forward path non-trivial.

Every field supports a full evaluation and a sparse evaluation restricted
to a boolean token mask.  All of them are pure functions of their inputs and
construction seed.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import ClassVar, Mapping, Sequence

import numpy as np

from app.core import DTYPE, CacheStateError, LatentChunk, NoiseSchedule

logger = logging.getLogger(__name__)

MIN_ATTENTION_CHANNELS = 4
"""Smallest channel count accepted by the toy attention field."""

MAX_ATTENTION_CHANNELS = 16
"""Largest channel count accepted by the toy attention field."""


@dataclass(frozen=True)
class ChunkTargets:
    """Clean data and noise endpoints of one chunk, both ``(F, H, W, C)``."""

    x_data: np.ndarray
    x_noise: np.ndarray

    def __post_init__(self) -> None:
        if self.x_data.shape != self.x_noise.shape:
            raise ValueError(
                f"target shape mismatch: {self.x_data.shape} vs {self.x_noise.shape}"
            )


@dataclass(frozen=True)
class TokenKV:
    """Keys and values of one chunk's tokens, each of shape ``(N, C)``."""

    keys: np.ndarray
    values: np.ndarray

    def copy(self) -> TokenKV:
        return TokenKV(self.keys.copy(), self.values.copy())


@dataclass(frozen=True)
class KVBlock:
    """Immutable keys/values of a finalized chunk, shaped ``(F, H*W, C)``."""

    chunk_index: int
    keys: np.ndarray
    values: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int(self.keys.shape[0] * self.keys.shape[1])


@dataclass(frozen=True)
class KVCacheState:
    """Append-only key/value cache of finalized chunks, ordered by index."""

    blocks: tuple[KVBlock, ...] = ()

    @property
    def total_tokens(self) -> int:
        return sum(block.n_tokens for block in self.blocks)

    @property
    def chunk_indices(self) -> tuple[int, ...]:
        return tuple(block.chunk_index for block in self.blocks)

    def block(self, chunk_index: int) -> KVBlock | None:
        for block in self.blocks:
            if block.chunk_index == chunk_index:
                return block
        return None

    def nbytes(self) -> int:
        return sum(block.keys.nbytes + block.values.nbytes for block in self.blocks)


@dataclass(frozen=True)
class ContextChunk:
    """An earlier chunk that is still denoising, seen at its current state."""

    chunk: LatentChunk


def finalize_chunk_kv(
    kv: KVCacheState, chunk: LatentChunk, field: VelocityField
) -> KVCacheState:
    """Append the keys/values of a fully denoised chunk to the cache.

    Raises
    ------
    CacheStateError
        If the chunk index was already finalized or is out of order.

    """
    if kv.block(chunk.chunk_index) is not None:
        raise CacheStateError(f"chunk {chunk.chunk_index} is already finalized")
    if kv.blocks and chunk.chunk_index < kv.blocks[-1].chunk_index:
        raise CacheStateError(
            f"chunk {chunk.chunk_index} finalized after chunk "
            f"{kv.blocks[-1].chunk_index}"
        )
    f, h, w, c = chunk.shape
    projected = field.project_kv(chunk.data, chunk.current_timestep)
    keys = projected.keys.reshape(f, h * w, c).copy()
    values = projected.values.reshape(f, h * w, c).copy()
    keys.setflags(write=False)
    values.setflags(write=False)
    logger.debug(
        "[finalize_chunk_kv] chunk=%d tokens=%d", chunk.chunk_index, f * h * w
    )
    return KVCacheState(kv.blocks + (KVBlock(chunk.chunk_index, keys, values),))


def _validate_mask(mask: np.ndarray, chunk: LatentChunk) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != chunk.shape[:3]:
        raise ValueError(
            f"mask shape {mask.shape} does not match chunk grid {chunk.shape[:3]}"
        )
    if not mask.any():
        raise ValueError("active mask is empty; short-circuit full skips upstream")
    return mask


class VelocityField(ABC):
    """Common interface of all velocity backends."""

    kind: ClassVar[str] = ""
    uses_kv: ClassVar[bool] = False

    def __init__(self, seed: int = 0) -> None:
        self.seed = int(seed)

    @abstractmethod
    def eval_full(
        self,
        chunk: LatentChunk,
        t: int,
        kv: KVCacheState | None = None,
        context: Sequence[ContextChunk] = (),
        token_kv: TokenKV | None = None,
    ) -> np.ndarray:
        """Velocity for every token of *chunk*, shaped like ``chunk.data``."""

    @abstractmethod
    def eval_sparse(
        self,
        chunk: LatentChunk,
        t: int,
        active_mask: np.ndarray,
        kv: KVCacheState | None = None,
        context: Sequence[ContextChunk] = (),
        token_kv: TokenKV | None = None,
    ) -> np.ndarray:
        """Velocity rows ``(N_active, C)`` for the tokens set in *active_mask*."""

    def project_kv(self, x: np.ndarray, t: int) -> TokenKV:
        """Keys/values of latent *x*; pointwise fields use the tokens themselves."""
        tokens = np.asarray(x, dtype=DTYPE).reshape(-1, x.shape[-1])
        return TokenKV(tokens.copy(), tokens.copy())


class PointwiseField(VelocityField):
    """Field whose velocity at a token depends only on that token."""

    @abstractmethod
    def _velocity(self, x: np.ndarray, t: int, chunk_index: int) -> np.ndarray:
        """Velocity of latent *x* (any leading shape, channels last)."""

    def eval_full(
        self,
        chunk: LatentChunk,
        t: int,
        kv: KVCacheState | None = None,
        context: Sequence[ContextChunk] = (),
        token_kv: TokenKV | None = None,
    ) -> np.ndarray:
        return self._velocity(chunk.data, t, chunk.chunk_index)

    def eval_sparse(
        self,
        chunk: LatentChunk,
        t: int,
        active_mask: np.ndarray,
        kv: KVCacheState | None = None,
        context: Sequence[ContextChunk] = (),
        token_kv: TokenKV | None = None,
    ) -> np.ndarray:
        mask = _validate_mask(active_mask, chunk)
        full = self.eval_full(chunk, t, kv, context, token_kv)
        return full.reshape(chunk.n_tokens, chunk.shape[3])[mask.ravel()]


class RectifiedOracleField(PointwiseField):
    """Oracle velocity ``x_noise - x_data`` of the straight interpolation path."""

    kind = "rectified-oracle"

    def __init__(self, targets: Mapping[int, ChunkTargets], seed: int = 0) -> None:
        super().__init__(seed)
        self.targets = dict(targets)

    def _velocity(self, x: np.ndarray, t: int, chunk_index: int) -> np.ndarray:
        target = self.targets.get(chunk_index)
        if target is None:
            raise ValueError(f"no oracle targets for chunk {chunk_index}")
        if target.x_data.shape != x.shape:
            raise ValueError(
                f"chunk shape {x.shape} does not match targets {target.x_data.shape}"
            )
        return np.asarray(target.x_noise - target.x_data, dtype=DTYPE)


class LinearField(PointwiseField):
    """Affine field ``v = A @ x + b`` applied to every token's channel vector.

    *matrix* may be a scalar (``A = a * I``) or a ``(C, C)`` array and
    *offset* a scalar or a length-``C`` vector.
    """

    kind = "linear-field"

    def __init__(
        self,
        matrix: float | np.ndarray = 0.5,
        offset: float | np.ndarray = 0.0,
        seed: int = 0,
    ) -> None:
        super().__init__(seed)
        self.matrix = np.asarray(matrix, dtype=DTYPE)
        self.offset = np.asarray(offset, dtype=DTYPE)
        if self.matrix.ndim not in (0, 2):
            raise ValueError(
                f"matrix must be scalar or (C, C), got {self.matrix.shape}"
            )
        if self.offset.ndim not in (0, 1):
            raise ValueError(f"offset must be scalar or (C,), got {self.offset.shape}")

    def _velocity(self, x: np.ndarray, t: int, chunk_index: int) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        if self.matrix.ndim == 0:
            out = self.matrix * x
        else:
            if self.matrix.shape != (x.shape[-1], x.shape[-1]):
                raise ValueError(
                    f"matrix {self.matrix.shape} incompatible with C={x.shape[-1]}"
                )
            out = x @ self.matrix.T
        return out + self.offset


class ToyAttentionField(VelocityField):
    """Single-head attention block with an MLP head and a KV cache.

    For token ``p`` at timestep ``t`` with ``z = x + e(t)``::

        v_p = x_p + beta_p + gain * g_p * MLP(o_p - z_p @ W_v)

    ``o_p`` attends over every key of every available frame (earlier chunks
    from the KV cache or still in flight, plus the chunk's own frames), with
    the additive bias ``-temporal_decay * |frame distance| - spatial_decay *
    |grid distance|^2``.  ``MLP(u) = tanh(u @ W1) @ W2`` has no biases.
    ``g_p`` is :meth:`motion_gate`, which is 0 wherever a token equals its
    neighbour frame, so static tokens keep a constant residual across steps.
    ``beta`` anchors each chunk to its targets so the ``gain = 0`` trajectory
    lands on ``x_data``.

    Parameters
    ----------
    channels : int
        Token width ``C`` (4 to 16).
    schedule : NoiseSchedule
        Schedule used for the time embedding and the anchor term.
    targets : Mapping[int, ChunkTargets] or None
        Per-chunk anchors; chunks without targets get ``beta = 0``.
    seed : int
        Seed of the frozen Gaussian weights.
    gain, temporal_decay, spatial_decay, hidden_width, max_frequency, embed_scale
        Shape parameters of the block.

    """

    kind = "toy-attention"
    uses_kv = True

    def __init__(
        self,
        channels: int,
        schedule: NoiseSchedule,
        targets: Mapping[int, ChunkTargets] | None = None,
        seed: int = 0,
        gain: float = 0.5,
        temporal_decay: float = 4.0,
        spatial_decay: float = 1.0,
        hidden_width: int = 16,
        max_frequency: float = 4.0,
        embed_scale: float = 0.5,
    ) -> None:
        super().__init__(seed)
        if not MIN_ATTENTION_CHANNELS <= channels <= MAX_ATTENTION_CHANNELS:
            raise ValueError(
                f"toy-attention channels must be in [{MIN_ATTENTION_CHANNELS}, "
                f"{MAX_ATTENTION_CHANNELS}], got {channels}"
            )
        if hidden_width < 1:
            raise ValueError(f"hidden_width must be >= 1, got {hidden_width}")
        if temporal_decay < 0.0 or spatial_decay < 0.0:
            raise ValueError(
                f"decays must be non-negative, got {temporal_decay}, {spatial_decay}"
            )
        if max_frequency <= 0.0:
            raise ValueError(f"max_frequency must be positive, got {max_frequency}")
        self.channels = channels
        self.schedule = schedule
        self.gain = float(gain)
        self.temporal_decay = float(temporal_decay)
        self.spatial_decay = float(spatial_decay)
        self.hidden_width = hidden_width
        self.max_frequency = float(max_frequency)
        self.embed_scale = float(embed_scale)

        rng = np.random.default_rng(self.seed)
        scale_c = 1.0 / math.sqrt(channels)
        self.w_q = rng.normal(0.0, scale_c, size=(channels, channels))
        self.w_k = rng.normal(0.0, scale_c, size=(channels, channels))
        self.w_v = rng.normal(0.0, scale_c, size=(channels, channels))
        self.w_1 = rng.normal(0.0, scale_c, size=(channels, hidden_width))
        scale_h = 1.0 / math.sqrt(hidden_width)
        self.w_2 = rng.normal(0.0, scale_h, size=(hidden_width, channels))

        self._distances: dict[tuple[int, int], np.ndarray] = {}
        self._beta: dict[int, np.ndarray] = {}
        for index, target in (targets or {}).items():
            self._beta[index] = self._anchor(target)

    def _anchor(self, target: ChunkTargets) -> np.ndarray:
        if target.x_data.shape[-1] != self.channels:
            raise ValueError(
                f"target channels {target.x_data.shape[-1]} != {self.channels}"
            )
        decay = (1.0 - self.schedule.step_size) ** self.schedule.total_steps
        beta = (decay * target.x_noise - target.x_data) / (1.0 - decay)
        return beta.reshape(-1, self.channels)

    def time_embedding(self, t: int) -> np.ndarray:
        """Sinusoidal embedding of ``sigma(t)`` with frequencies below the cap."""
        half = (self.channels + 1) // 2
        freqs = self.max_frequency ** (np.arange(half, dtype=DTYPE) / half)
        phase = freqs * self.schedule.sigma(t)
        emb = np.concatenate([np.sin(phase), np.cos(phase)])[: self.channels]
        return self.embed_scale * emb

    def project_kv(self, x: np.ndarray, t: int) -> TokenKV:
        z = np.asarray(x, dtype=DTYPE).reshape(-1, self.channels)
        z = z + self.time_embedding(t)
        return TokenKV(z @ self.w_k, z @ self.w_v)

    def motion_gate(self, x: np.ndarray) -> np.ndarray:
        """Per-token gate in ``[0, 1]`` from the chunk's own frame differences.

        A token's gate is the product of ``tanh(|x_f - x_g|)`` over its
        temporal neighbours ``g`` inside the chunk, so a token equal to a
        neighbouring frame gets exactly 0.  Single-frame chunks are ungated.
        """
        x = np.asarray(x, dtype=DTYPE)
        gate = np.ones(x.shape[:-1], dtype=DTYPE)
        if x.shape[0] > 1:
            change = np.tanh(np.linalg.norm(np.diff(x, axis=0), axis=-1))
            gate[1:] *= change
            gate[:-1] *= change
        return gate.ravel()

    def _grid_distance(self, height: int, width: int) -> np.ndarray:
        """Squared grid distance between every pair of spatial positions."""
        key = (height, width)
        if key not in self._distances:
            rows, cols = np.divmod(np.arange(height * width), width)
            self._distances[key] = (
                (rows[:, None] - rows[None, :]) ** 2
                + (cols[:, None] - cols[None, :]) ** 2
            ).astype(DTYPE)
        return self._distances[key]

    def _context_kv(
        self,
        chunk: LatentChunk,
        kv: KVCacheState | None,
        context: Sequence[ContextChunk],
    ) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
        """Keys, values and global frame ids of every earlier chunk."""
        f, h, w, c = chunk.shape
        in_flight = {item.chunk.chunk_index: item.chunk for item in context}
        keys: list[np.ndarray] = []
        values: list[np.ndarray] = []
        frames: list[np.ndarray] = []
        for index in range(chunk.chunk_index):
            block = kv.block(index) if kv is not None else None
            if block is not None:
                k_block, v_block = block.keys, block.values
            elif index in in_flight:
                earlier = in_flight[index]
                if earlier.shape != chunk.shape:
                    raise ValueError(
                        f"context chunk {index} shape {earlier.shape} "
                        f"!= {chunk.shape}"
                    )
                projected = self.project_kv(earlier.data, earlier.current_timestep)
                k_block = projected.keys.reshape(f, h * w, c)
                v_block = projected.values.reshape(f, h * w, c)
            else:
                raise CacheStateError(
                    f"chunk {chunk.chunk_index} needs context from chunk {index}, "
                    "which is neither finalized nor in flight"
                )
            keys.append(k_block)
            values.append(v_block)
            frames.append(index * f + np.arange(f))
        return keys, values, frames

    def _attend(
        self,
        chunk: LatentChunk,
        t: int,
        active: np.ndarray,
        kv: KVCacheState | None,
        context: Sequence[ContextChunk],
        token_kv: TokenKV | None,
    ) -> np.ndarray:
        f, h, w, c = chunk.shape
        if c != self.channels:
            raise ValueError(f"chunk channels {c} != field channels {self.channels}")
        spatial = h * w
        tokens = chunk.tokens()
        if token_kv is None:
            token_kv = self.project_kv(chunk.data, t)
        elif token_kv.keys.shape != tokens.shape:
            raise ValueError(
                f"token K/V table {token_kv.keys.shape} != tokens {tokens.shape}"
            )

        keys, values, frames = self._context_kv(chunk, kv, context)
        keys.append(token_kv.keys.reshape(f, spatial, c))
        values.append(token_kv.values.reshape(f, spatial, c))
        frames.append(chunk.chunk_index * f + np.arange(f))
        all_keys = np.concatenate(keys, axis=0).reshape(-1, c)
        all_values = np.concatenate(values, axis=0).reshape(-1, c)
        all_frames = np.concatenate(frames).astype(DTYPE)

        query_frame, query_pos = np.divmod(active, spatial)
        z = tokens[active] + self.time_embedding(t)
        queries = z @ self.w_q

        scores = (queries @ all_keys.T / math.sqrt(c)).reshape(
            active.size, all_frames.size, spatial
        )
        distance = np.abs(
            (chunk.chunk_index * f + query_frame)[:, None].astype(DTYPE)
            - all_frames[None, :]
        )
        scores = scores - self.temporal_decay * distance[:, :, None]
        spatial_bias = self._grid_distance(h, w)[query_pos]
        scores = scores - self.spatial_decay * spatial_bias[:, None, :]
        scores = scores.reshape(active.size, all_frames.size * spatial)
        scores = scores - scores.max(axis=1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=1, keepdims=True)
        attended = weights @ all_values

        gate = self.motion_gate(chunk.data)[active]
        hidden = np.tanh((attended - z @ self.w_v) @ self.w_1)
        velocity = tokens[active] + self.gain * gate[:, None] * (hidden @ self.w_2)
        beta = self._beta.get(chunk.chunk_index)
        if beta is not None:
            if beta.shape != tokens.shape:
                raise ValueError(
                    f"anchor shape {beta.shape} does not match tokens {tokens.shape}"
                )
            velocity = velocity + beta[active]
        return velocity

    def eval_full(
        self,
        chunk: LatentChunk,
        t: int,
        kv: KVCacheState | None = None,
        context: Sequence[ContextChunk] = (),
        token_kv: TokenKV | None = None,
    ) -> np.ndarray:
        active = np.arange(chunk.n_tokens)
        rows = self._attend(chunk, t, active, kv, context, token_kv)
        return rows.reshape(chunk.shape)

    def eval_sparse(
        self,
        chunk: LatentChunk,
        t: int,
        active_mask: np.ndarray,
        kv: KVCacheState | None = None,
        context: Sequence[ContextChunk] = (),
        token_kv: TokenKV | None = None,
    ) -> np.ndarray:
        mask = _validate_mask(active_mask, chunk)
        active = np.flatnonzero(mask.ravel())
        return self._attend(chunk, t, active, kv, context, token_kv)
