"""Run traces: step records, header, and the MCTR binary container.

A trace is written as two files::

    <name>.mctr        binary records (little-endian, length-prefixed)
    <name>.mctr.json   header sidecar (sorted-key JSON)

The byte layout is documented in ``docs/trace_format.md``.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, BinaryIO, Iterator, Literal

import numpy as np
from pydantic import BaseModel, ValidationError

from app.flops import FlopCounts, ModelDims

logger = logging.getLogger(__name__)

MAGIC = b"MCTR"
"""Leading bytes of every trace container."""

FORMAT_VERSION = 1
"""Container version written by :func:`write_trace`."""

Verbosity = Literal["decisions", "latents", "residuals"]

VERBOSITY_LEVELS: dict[str, int] = {"decisions": 0, "latents": 1, "residuals": 2}
"""Trace verbosity levels; each level includes everything below it."""

RECORD_STEP = 1
RECORD_FINAL = 2

_PREAMBLE = struct.Struct("<4sI")
_RECORD_PREFIX = struct.Struct("<IB")
_STEP = struct.Struct("<IIIIBBdIIIQQQQ")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_U8 = struct.Struct("<B")


class TraceFormatError(ValueError):
    """Raised when a trace container is malformed or unsupported."""


class DecisionMode(IntEnum):
    FULL_COMPUTE = 0
    FULL_SKIP = 1
    TOKEN_SPARSE = 2

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


class Phase(IntEnum):
    VANILLA = 0
    WARMUP = 1
    PHASE1 = 2
    PHASE2 = 3
    STEP_GATE = 4

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


def verbosity_at_least(level: str, required: str) -> bool:
    return VERBOSITY_LEVELS[level] >= VERBOSITY_LEVELS[required]


@dataclass
class StepRecord:
    """One chunk step of a run.

    ``step`` is the 0-based position inside the chunk's window and ``t`` the
    input timestep (``T - step``).  ``mask`` is set for token-sparse steps.
    ``tensors`` may hold ``latent``, ``weights``, ``velocity`` and
    ``residual`` snapshots depending on verbosity.
    """

    chunk: int
    step: int
    t: int
    tick: int
    mode: DecisionMode
    phase: Phase
    delta: float | None
    n_active: int
    n_tokens: int
    n_kv: int
    flops: FlopCounts
    mask: np.ndarray | None = None
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def matches(self, other: StepRecord) -> bool:
        """Exact field-by-field comparison, tensors included."""
        scalars = (
            "chunk",
            "step",
            "t",
            "tick",
            "mode",
            "phase",
            "n_active",
            "n_tokens",
            "n_kv",
            "flops",
        )
        if any(getattr(self, name) != getattr(other, name) for name in scalars):
            return False
        if (self.delta is None) != (other.delta is None):
            return False
        if self.delta is not None and self.delta != other.delta:
            return False
        if (self.mask is None) != (other.mask is None):
            return False
        if self.mask is not None and not np.array_equal(self.mask, other.mask):
            return False
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(
            np.array_equal(value, other.tensors[name])
            for name, value in self.tensors.items()
        )


class TraceHeader(BaseModel):
    """Pydantic model for the trace sidecar header."""

    format: str = "MCTR"
    version: int = FORMAT_VERSION
    config_hash: str = ""
    scenario_hash: str = ""
    policy: str = ""
    policy_kind: str = ""
    policy_params: dict[str, Any] = {}
    seed: int = 0
    chunks: int
    shape: tuple[int, int, int, int]
    total_steps: int
    window: int
    dt: float
    field_kind: str = ""
    stale_kv: bool = True
    verbosity: Verbosity = "decisions"
    model_dims: ModelDims = ModelDims()
    degenerate: bool = False
    peak_memory_bytes: int = 0
    record_count: int = 0


@dataclass
class RunTrace:
    """Header, ordered step records and final latents of one policy run."""

    header: TraceHeader
    records: list[StepRecord]
    final: np.ndarray | None = None

    def chunk_records(self, chunk: int) -> list[StepRecord]:
        return [record for record in self.records if record.chunk == chunk]

    def has_tensor(self, name: str) -> bool:
        return any(name in record.tensors for record in self.records)

    def consecutive_pairs(self) -> Iterator[tuple[StepRecord, StepRecord]]:
        """Adjacent ``(step - 1, step)`` record pairs of every chunk."""
        for chunk in range(self.header.chunks):
            records = self.chunk_records(chunk)
            for previous, current in zip(records, records[1:]):
                if current.step == previous.step + 1:
                    yield previous, current


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(_U16.pack(len(tensors)))
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        out.write(_U8.pack(len(encoded)))
        out.write(encoded)
        out.write(_U8.pack(array.ndim))
        for dim in array.shape:
            out.write(_U32.pack(dim))
        out.write(array.tobytes())
    return out.getvalue()


def _pack_step(record: StepRecord) -> bytes:
    delta = math.nan if record.delta is None else record.delta
    counts = record.flops
    head = _STEP.pack(
        record.chunk,
        record.step,
        record.t,
        record.tick,
        int(record.mode),
        int(record.phase),
        delta,
        record.n_active,
        record.n_tokens,
        record.n_kv,
        counts.attention,
        counts.attention_gemm,
        counts.ffn_gemm,
        counts.reuse,
    )
    if record.mask is None:
        bitmap = b""
    else:
        bitmap = np.packbits(record.mask.ravel(), bitorder="little").tobytes()
    return head + _U32.pack(len(bitmap)) + bitmap + _pack_tensors(record.tensors)


def _write_record(handle: BinaryIO, kind: int, payload: bytes) -> None:
    handle.write(_RECORD_PREFIX.pack(len(payload), kind))
    handle.write(payload)


def write_trace(trace: RunTrace, path: Path) -> Path:
    """Write *trace* to *path* plus its JSON sidecar and return *path*."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = trace.header.model_copy(update={"record_count": len(trace.records)})
    with path.open("wb") as handle:
        handle.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION))
        for record in trace.records:
            _write_record(handle, RECORD_STEP, _pack_step(record))
        if trace.final is not None:
            _write_record(handle, RECORD_FINAL, _pack_tensors({"final": trace.final}))
    sidecar_path(path).write_text(
        json.dumps(header.model_dump(mode="json"), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    logger.info("[write_trace] path=%s records=%d", path, len(trace.records))
    return path


class _Reader:
    """Cursor over an in-memory payload that reports truncation."""

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise TraceFormatError(
                f"truncated payload: wanted {size} bytes at offset {self.offset}"
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple[Any, ...]:
        return fmt.unpack(self.take(fmt.size))


def _unpack_tensors(reader: _Reader) -> dict[str, np.ndarray]:
    (count,) = reader.unpack(_U16)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack(_U8)
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack(_U8)
        shape = tuple(reader.unpack(_U32)[0] for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.int64)) * 8
        array = np.frombuffer(reader.take(size), dtype="<f8").reshape(shape)
        tensors[name] = array.astype(np.float64)
    return tensors


def _unpack_step(payload: bytes, grid: tuple[int, int, int]) -> StepRecord:
    reader = _Reader(payload)
    values = reader.unpack(_STEP)
    (bitmap_len,) = reader.unpack(_U32)
    mask = None
    if bitmap_len:
        bits = np.frombuffer(reader.take(bitmap_len), dtype=np.uint8)
        count = grid[0] * grid[1] * grid[2]
        mask = np.unpackbits(bits, count=count, bitorder="little").astype(bool)
        mask = mask.reshape(grid)
    tensors = _unpack_tensors(reader)
    delta = None if math.isnan(values[6]) else values[6]
    try:
        mode, phase = DecisionMode(values[4]), Phase(values[5])
    except ValueError as exc:
        raise TraceFormatError(f"unknown decision code: {exc}") from exc
    return StepRecord(
        chunk=values[0],
        step=values[1],
        t=values[2],
        tick=values[3],
        mode=mode,
        phase=phase,
        delta=delta,
        n_active=values[7],
        n_tokens=values[8],
        n_kv=values[9],
        flops=FlopCounts(*values[10:14]),
        mask=mask,
        tensors=tensors,
    )


def read_header(path: Path) -> TraceHeader:
    """Load and validate the sidecar header of the trace at *path*."""
    raw = sidecar_path(Path(path)).read_text(encoding="utf-8")
    try:
        return TraceHeader(**json.loads(raw))
    except (json.JSONDecodeError, TypeError, ValidationError) as exc:
        raise TraceFormatError(f"invalid trace header for {path}: {exc}") from exc


def read_trace(path: Path) -> RunTrace:
    """Read a trace written by :func:`write_trace`.

    Raises
    ------
    TraceFormatError
        On a bad magic, an unsupported version or a truncated record.
    OSError
        If either file cannot be read.

    """
    path = Path(path)
    header = read_header(path)
    data = path.read_bytes()
    if len(data) < _PREAMBLE.size:
        raise TraceFormatError(f"{path} is too short to be a trace")
    magic, version = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r} in {path}")
    if version != FORMAT_VERSION:
        raise TraceFormatError(f"unsupported trace version {version} in {path}")

    grid = header.shape[:3]
    records: list[StepRecord] = []
    final = None
    reader = _Reader(data)
    reader.offset = _PREAMBLE.size
    while reader.offset < len(data):
        length, kind = reader.unpack(_RECORD_PREFIX)
        payload = reader.take(length)
        if kind == RECORD_STEP:
            records.append(_unpack_step(payload, grid))
        elif kind == RECORD_FINAL:
            final = _unpack_tensors(_Reader(payload))["final"]
        else:
            raise TraceFormatError(f"unknown record type {kind} in {path}")

    if header.record_count and header.record_count != len(records):
        raise TraceFormatError(
            f"header announces {header.record_count} records, found {len(records)}"
        )
    return RunTrace(header, records, final)
