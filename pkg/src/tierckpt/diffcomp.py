"""Gradient payload codec: INT8 quantization for small shards, sampled-threshold
sparsification for large ones, and a raw float32 form for lossless runs.

Wire format (little-endian), one leading tag byte:

* ``0`` quantized: ``u64 length, f64 scale, i8[length]``
* ``1`` sparse: ``u64 original_length, f64 threshold, u32 chunk_count``, then per
  chunk ``u64 base_offset, u32 entry_count, f16[entry_count], i32[entry_count]``
* ``2`` raw: ``u64 length, f32[length]``
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, CorruptionError
from .state import GradientShard

INT32_MAX = 2**31 - 1

TAG_QUANTIZED = 0
TAG_SPARSE = 1
TAG_RAW = 2

_QD_HEAD = struct.Struct("<BQd")
_SC_HEAD = struct.Struct("<BQdI")
_CHUNK_HEAD = struct.Struct("<QI")
_RAW_HEAD = struct.Struct("<BQ")


@dataclass(frozen=True)
class CompressionConfig:
    small_threshold: int = 100_000
    k: float = 0.01
    sample_size: int = 16384
    chunk_limit: int = INT32_MAX
    seed: int = 0
    lossless: bool = False

    def __post_init__(self):
        if self.small_threshold <= 0:
            raise ConfigError(f"compression.small_threshold: must be > 0, got {self.small_threshold}")
        if not 0 < self.k <= 1:
            raise ConfigError(f"compression.k: must be in (0, 1], got {self.k}")
        if self.sample_size < 1:
            raise ConfigError(f"compression.sample_size: must be >= 1, got {self.sample_size}")
        if not 1 <= self.chunk_limit <= INT32_MAX:
            raise ConfigError(f"compression.chunk_limit: must be in [1, 2^31-1], got {self.chunk_limit}")


@dataclass(frozen=True, eq=False)
class QuantizedDense:
    q: np.ndarray  # int8
    scale: float

    @property
    def length(self) -> int:
        return int(self.q.size)

    def __eq__(self, other):
        return (isinstance(other, QuantizedDense) and self.scale == other.scale
                and np.array_equal(self.q, other.q))


@dataclass(frozen=True, eq=False)
class SparseChunk:
    base_offset: int
    values: np.ndarray  # float16
    indices: np.ndarray  # int32, local to the chunk

    def __eq__(self, other):
        return (isinstance(other, SparseChunk) and self.base_offset == other.base_offset
                and np.array_equal(self.values.view(np.uint16), other.values.view(np.uint16))
                and np.array_equal(self.indices, other.indices))


@dataclass(frozen=True)
class SparseChunks:
    chunks: tuple[SparseChunk, ...]
    original_length: int
    threshold: float
    # not on the wire; None after deserialization
    k_target: float | None = field(default=None, compare=False)

    @property
    def kept(self) -> int:
        return sum(int(c.indices.size) for c in self.chunks)


@dataclass(frozen=True, eq=False)
class RawDense:
    values: np.ndarray  # float32

    @property
    def length(self) -> int:
        return int(self.values.size)

    def __eq__(self, other):
        return isinstance(other, RawDense) and np.array_equal(
            self.values.view(np.uint32), other.values.view(np.uint32))


CompressedPayload = QuantizedDense | SparseChunks | RawDense


def quantize(x: np.ndarray) -> QuantizedDense:
    """Symmetric zero-point-free INT8 with ``scale = max|x| / 127``."""
    x64 = np.asarray(x, dtype=np.float64)
    peak = float(np.max(np.abs(x64))) if x64.size else 0.0
    scale = peak / 127.0 if peak > 0 else 1.0
    q = np.clip(np.rint(x64 / scale), -127, 127).astype(np.int8)
    return QuantizedDense(q=q, scale=scale)


def tensor_seed(cfg: CompressionConfig, rank: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, rank, iteration, 0xC0DE])


def estimate_threshold(x: np.ndarray, k: float, sample_size: int, rng: np.random.Generator) -> np.float32:
    """The ceil((1-k)*S)-th smallest magnitude of a uniform sample of S entries."""
    n = x.size
    idx = rng.integers(0, n, size=sample_size)
    mags = np.sort(np.abs(x[idx]))
    rank = max(1, math.ceil((1.0 - k) * sample_size))
    return np.float32(mags[rank - 1])


def sparsify(x: np.ndarray, threshold: np.float32, chunk_limit: int) -> tuple[SparseChunk, ...]:
    chunks = []
    n = x.size
    for base in range(0, n, chunk_limit):
        part = x[base:base + chunk_limit]
        m = part.size
        vals = np.empty(m, dtype=np.uint16)
        idx = np.empty(m, dtype=np.int32)
        count = kernels.threshold_compact(part, threshold, vals, idx)
        chunks.append(SparseChunk(
            base_offset=base,
            values=vals[:count].copy().view(np.float16),
            indices=idx[:count].copy(),
        ))
    return tuple(chunks)


def compress(grad: GradientShard, cfg: CompressionConfig) -> CompressedPayload:
    x = np.ascontiguousarray(grad.values, dtype=np.float32)
    if cfg.lossless:
        return RawDense(values=x.copy())
    if x.size < cfg.small_threshold:
        return quantize(x)
    rng = tensor_seed(cfg, grad.rank, grad.iteration)
    threshold = estimate_threshold(x, cfg.k, cfg.sample_size, rng)
    return SparseChunks(
        chunks=sparsify(x, threshold, cfg.chunk_limit),
        original_length=int(x.size),
        threshold=float(threshold),
        k_target=cfg.k,
    )


def _chunk_lengths(payload: SparseChunks) -> list[int]:
    offsets = [c.base_offset for c in payload.chunks]
    if payload.original_length == 0:
        if offsets:
            raise CorruptionError("chunks present for an empty tensor")
        return []
    if not offsets or offsets[0] != 0:
        raise CorruptionError("chunks do not start at offset 0")
    ends = offsets[1:] + [payload.original_length]
    lengths = []
    for start, end in zip(offsets, ends):
        if end <= start:
            raise CorruptionError(f"chunk offsets not strictly increasing at {start}")
        if end - start > INT32_MAX:
            raise CorruptionError(f"chunk at {start} exceeds the int32 index range")
        lengths.append(end - start)
    return lengths


def decompress(payload: CompressedPayload) -> np.ndarray:
    """Dense float32 gradient values."""
    if isinstance(payload, RawDense):
        return payload.values.astype(np.float32, copy=True)
    if isinstance(payload, QuantizedDense):
        return (payload.scale * payload.q.astype(np.float64)).astype(np.float32)
    if isinstance(payload, SparseChunks):
        out = np.zeros(payload.original_length, dtype=np.float32)
        for chunk, length in zip(payload.chunks, _chunk_lengths(payload)):
            idx = chunk.indices
            if idx.size != chunk.values.size:
                raise CorruptionError(f"chunk at {chunk.base_offset}: {idx.size} indices vs {chunk.values.size} values")
            if idx.size == 0:
                continue
            if idx.min() < 0 or idx.max() >= length:
                raise CorruptionError(f"chunk at {chunk.base_offset}: index outside [0, {length})")
            if np.unique(idx).size != idx.size:
                raise CorruptionError(f"chunk at {chunk.base_offset}: duplicate indices")
            out[chunk.base_offset + idx.astype(np.int64)] = chunk.values.astype(np.float32)
        return out
    raise TypeError(f"not a payload: {type(payload).__name__}")


def payload_size(payload: CompressedPayload) -> int:
    if isinstance(payload, QuantizedDense):
        return _QD_HEAD.size + payload.length
    if isinstance(payload, SparseChunks):
        return _SC_HEAD.size + sum(_CHUNK_HEAD.size + 6 * c.indices.size for c in payload.chunks)
    if isinstance(payload, RawDense):
        return _RAW_HEAD.size + 4 * payload.length
    raise TypeError(f"not a payload: {type(payload).__name__}")


def encode(payload: CompressedPayload) -> bytes:
    if isinstance(payload, QuantizedDense):
        return _QD_HEAD.pack(TAG_QUANTIZED, payload.length, payload.scale) + payload.q.astype(np.int8).tobytes()
    if isinstance(payload, SparseChunks):
        parts = [_SC_HEAD.pack(TAG_SPARSE, payload.original_length, payload.threshold, len(payload.chunks))]
        for c in payload.chunks:
            parts.append(_CHUNK_HEAD.pack(c.base_offset, c.indices.size))
            parts.append(np.ascontiguousarray(c.values, dtype="<f2").tobytes())
            parts.append(np.ascontiguousarray(c.indices, dtype="<i4").tobytes())
        return b"".join(parts)
    if isinstance(payload, RawDense):
        return _RAW_HEAD.pack(TAG_RAW, payload.length) + np.ascontiguousarray(payload.values, dtype="<f4").tobytes()
    raise TypeError(f"not a payload: {type(payload).__name__}")


def decode(buf: bytes | memoryview, offset: int = 0) -> tuple[CompressedPayload, int]:
    """Parse one payload starting at ``offset``; returns it and the offset just past it."""
    buf = memoryview(buf)
    if offset >= len(buf):
        raise CorruptionError("truncated payload: missing tag")
    tag = buf[offset]
    try:
        if tag == TAG_QUANTIZED:
            _, length, scale = _QD_HEAD.unpack_from(buf, offset)
            start = offset + _QD_HEAD.size
            _need(buf, start + length)
            q = np.frombuffer(buf, dtype=np.int8, count=length, offset=start).copy()
            return QuantizedDense(q=q, scale=scale), start + length
        if tag == TAG_SPARSE:
            _, original_length, threshold, count = _SC_HEAD.unpack_from(buf, offset)
            pos = offset + _SC_HEAD.size
            chunks = []
            for _ in range(count):
                base, m = _CHUNK_HEAD.unpack_from(buf, pos)
                pos += _CHUNK_HEAD.size
                _need(buf, pos + 6 * m)
                vals = np.frombuffer(buf, dtype="<f2", count=m, offset=pos).astype(np.float16)
                pos += 2 * m
                idx = np.frombuffer(buf, dtype="<i4", count=m, offset=pos).astype(np.int32)
                pos += 4 * m
                chunks.append(SparseChunk(base_offset=base, values=vals, indices=idx))
            return SparseChunks(chunks=tuple(chunks), original_length=original_length, threshold=threshold), pos
        if tag == TAG_RAW:
            _, length = _RAW_HEAD.unpack_from(buf, offset)
            start = offset + _RAW_HEAD.size
            _need(buf, start + 4 * length)
            vals = np.frombuffer(buf, dtype="<f4", count=length, offset=start).astype(np.float32)
            return RawDense(values=vals), start + 4 * length
    except struct.error as exc:
        raise CorruptionError(f"truncated payload: {exc}") from None
    raise CorruptionError(f"unknown payload tag {tag}")


def _need(buf: memoryview, end: int) -> None:
    if end > len(buf):
        raise CorruptionError(f"truncated payload: need {end} bytes, have {len(buf)}")
