"""Synthetic moving-blob latent videos with ground-truth motion masks.

A truncated Gaussian bump travels over a static textured background and
reflects off the grid edges.  The clean video is cut into chunks of ``F``
frames; each chunk gets its own seeded noise endpoint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, Field, model_validator

from app.core import DTYPE
from app.fields import ChunkTargets

logger = logging.getLogger(__name__)


class BlobParams(BaseModel):
    """Pydantic model describing one moving-blob scenario."""

    chunks: int = Field(default=3, ge=1)
    frames: int = Field(default=4, ge=1)
    height: int = Field(default=12, ge=1)
    width: int = Field(default=12, ge=1)
    channels: int = Field(default=8, ge=1)
    radius: float = Field(default=4.0, gt=0.0)
    amplitude: float = 2.0
    velocity: tuple[float, float] = (1.0, 0.5)
    start: tuple[float, float] | None = None
    texture_std: float = Field(default=0.3, ge=0.0)
    noise_correlation: float = Field(default=1.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _blob_fits(self) -> BlobParams:
        if self.radius >= min(self.height, self.width) / 2.0:
            raise ValueError(
                f"radius {self.radius} must be below min(H, W)/2 = "
                f"{min(self.height, self.width) / 2.0}"
            )
        return self

    @property
    def total_frames(self) -> int:
        return self.chunks * self.frames


@dataclass(frozen=True)
class MovingBlobScenario:
    """Clean video, per-chunk noise and per-frame motion masks.

    Attributes
    ----------
    params : BlobParams
        Parameters the scenario was generated from.
    seed : int
        Generation seed.
    x_data : np.ndarray
        Clean latents, shape ``(chunks, F, H, W, C)``.
    x_noise : np.ndarray
        Noise endpoints, same shape as ``x_data``.
    motion_masks : np.ndarray
        Boolean ``(chunks * F, H, W)``; frame ``g`` marks tokens whose data
        differs from frame ``g - 1``.  Global frame 0 is empty.
    centers : np.ndarray
        Blob centre ``(y, x)`` per global frame.

    """

    params: BlobParams
    seed: int
    x_data: np.ndarray
    x_noise: np.ndarray
    motion_masks: np.ndarray
    centers: np.ndarray

    @property
    def chunks(self) -> int:
        return int(self.x_data.shape[0])

    @property
    def chunk_shape(self) -> tuple[int, int, int, int]:
        _, f, h, w, c = self.x_data.shape
        return f, h, w, c

    def targets(self) -> dict[int, ChunkTargets]:
        return {
            i: ChunkTargets(self.x_data[i], self.x_noise[i]) for i in range(self.chunks)
        }

    def chunk_masks(self, chunk: int) -> np.ndarray:
        """Motion masks of the frames belonging to *chunk*, ``(F, H, W)``."""
        frames = self.params.frames
        return self.motion_masks[chunk * frames : (chunk + 1) * frames]

    def video(self) -> np.ndarray:
        """Clean latents as one ``(chunks * F, H, W, C)`` video."""
        _, f, h, w, c = self.x_data.shape
        return self.x_data.reshape(self.chunks * f, h, w, c)


def _reflect(position: np.ndarray, low: float, high: float) -> np.ndarray:
    """Fold *position* into ``[low, high]`` by mirror reflection."""
    span = high - low
    if span <= 0.0:
        return np.full_like(position, (low + high) / 2.0)
    period = 2.0 * span
    offset = np.mod(position - low, period)
    return low + np.where(offset > span, period - offset, offset)


def blob_centers(params: BlobParams) -> np.ndarray:
    """Blob centre ``(y, x)`` for every global frame."""
    frames = np.arange(params.total_frames, dtype=DTYPE)
    centers = np.empty((params.total_frames, 2), dtype=DTYPE)
    for axis, size in enumerate((params.height, params.width)):
        low = params.radius
        high = size - 1.0 - params.radius
        start = params.start[axis] if params.start is not None else low
        path = start + params.velocity[axis] * frames
        centers[:, axis] = _reflect(path, low, high)
    return centers


def _bump(params: BlobParams, center: np.ndarray) -> np.ndarray:
    """Truncated Gaussian of width ``radius / 2``, zero beyond ``radius``."""
    yy, xx = np.meshgrid(
        np.arange(params.height, dtype=DTYPE),
        np.arange(params.width, dtype=DTYPE),
        indexing="ij",
    )
    dist2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    sigma = params.radius / 2.0
    bump = params.amplitude * np.exp(-dist2 / (2.0 * sigma**2))
    return np.where(dist2 <= params.radius**2, bump, 0.0)


def _chunk_noise(params: BlobParams, seed: int, chunk: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 1, chunk])
    shape = (params.height, params.width, params.channels)
    shared = rng.normal(size=shape)
    rho = params.noise_correlation
    if rho == 1.0:
        return np.broadcast_to(shared, (params.frames, *shape)).copy()
    own = rng.normal(size=(params.frames, *shape))
    return np.sqrt(rho) * shared[None] + np.sqrt(1.0 - rho) * own


def generate_moving_blob(params: BlobParams, seed: int) -> MovingBlobScenario:
    """Generate a deterministic moving-blob scenario.

    Parameters
    ----------
    params : BlobParams
        Grid, blob and noise settings.
    seed : int
        Seed for the texture, channel gains and per-chunk noise.

    Returns
    -------
    MovingBlobScenario
        Clean video, noise endpoints and ground-truth motion masks.

    """
    rng = np.random.default_rng([seed, 0])
    texture = rng.normal(
        0.0, params.texture_std, size=(params.height, params.width, params.channels)
    )
    gains = rng.uniform(0.5, 1.0, size=params.channels)

    centers = blob_centers(params)
    video = np.empty(
        (params.total_frames, params.height, params.width, params.channels),
        dtype=DTYPE,
    )
    for g, center in enumerate(centers):
        video[g] = texture + _bump(params, center)[..., None] * gains

    masks = np.zeros((params.total_frames, params.height, params.width), dtype=bool)
    if params.total_frames > 1:
        masks[1:] = np.abs(np.diff(video, axis=0)).sum(axis=-1) > 0.0

    shape = (params.chunks, params.frames, params.height, params.width, params.channels)
    x_data = video.reshape(shape)
    x_noise = np.stack(
        [_chunk_noise(params, seed, i) for i in range(params.chunks)]
    ).reshape(shape)
    logger.debug(
        "[generate_moving_blob] seed=%d frames=%d moving_fraction=%.3f",
        seed,
        params.total_frames,
        float(masks.mean()),
    )
    return MovingBlobScenario(params, seed, x_data, x_noise, masks, centers)
