import math
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tierckpt.diffcomp import (
    CompressionConfig, QuantizedDense, RawDense, SparseChunk, SparseChunks, compress, decode,
    decompress, encode, payload_size, quantize,
)
from tierckpt.errors import ConfigError, CorruptionError
from tierckpt.state import GradientShard

import oracles

GOLDEN = Path(__file__).parent / "golden"


def shard(x, rank=0, iteration=0):
    return GradientShard(iteration, rank, np.asarray(x, dtype=np.float32))


def test_constant_small_tensor():
    p = compress(shard(np.full(10, 0.3)), CompressionConfig())
    assert isinstance(p, QuantizedDense)
    assert (p.q == 127).all()
    assert p.scale == pytest.approx(np.float32(0.3) / 127)


def test_all_zero_quantized_scale_one():
    p = quantize(np.zeros(5, np.float32))
    assert p.scale == 1.0 and not p.q.any()


def test_all_zero_large_tensor(backend):
    p = compress(shard(np.zeros(200_000)), CompressionConfig())
    assert isinstance(p, SparseChunks) and p.kept == 0
    assert not decompress(p).any()


@pytest.mark.parametrize("seed", range(3))
def test_kept_band_and_topk(backend, seed):
    x = np.random.default_rng(seed).standard_normal(1_000_000).astype(np.float32)
    p = compress(shard(x, iteration=seed), CompressionConfig())
    n = x.size
    assert 0.005 * n <= p.kept <= 0.02 * n
    kept = np.zeros(n, bool)
    for c in p.chunks:
        kept[c.base_offset + c.indices] = True
    # exact top-k: the kept set is a prefix of the magnitude order, up to the sampled cut
    assert np.abs(x[kept]).min() >= np.abs(x[~kept]).max()
    exact = oracles.topk_threshold(x, 0.01)
    assert abs(p.threshold - exact) / exact < 0.1


def test_quantized_error_bound():
    x = np.random.default_rng(0).standard_normal(5000).astype(np.float32)
    p = compress(shard(x), CompressionConfig())
    err = np.abs(decompress(p).astype(np.float64) - x)
    assert err.max() <= p.scale / 2 * (1 + 1e-6)


def test_sparse_support_exact(backend):
    x = np.random.default_rng(3).standard_normal(300_000).astype(np.float32)
    p = compress(shard(x), CompressionConfig(chunk_limit=1 << 17))
    dense = decompress(p)
    want, keep = oracles.dense_reference(x, p.threshold)
    assert np.array_equal(np.flatnonzero(dense), keep)
    assert dense.tobytes() == want.tobytes()


def test_raw_is_lossless():
    x = np.random.default_rng(0).standard_normal(1000).astype(np.float32)
    p = compress(shard(x), CompressionConfig(lossless=True))
    assert isinstance(p, RawDense)
    assert decompress(p).tobytes() == x.tobytes()


def test_payload_size_formulas():
    q = quantize(np.ones(7, np.float32))
    assert payload_size(q) == 7 + 8 + 8 + 1
    chunks = (SparseChunk(0, np.ones(3, np.float16), np.arange(3, dtype=np.int32)),
              SparseChunk(4, np.ones(2, np.float16), np.arange(2, dtype=np.int32)))
    sc = SparseChunks(chunks, 8, 0.5)
    assert payload_size(sc) == 1 + 8 + 8 + 4 + 2 * 12 + 6 * 5
    for p in (q, sc, RawDense(np.ones(3, np.float32))):
        assert payload_size(p) == len(encode(p))


def test_compression_ratio():
    x = np.random.default_rng(9).standard_normal(1_000_000).astype(np.float32)
    p = compress(shard(x), CompressionConfig())
    assert len(encode(p)) <= 0.02 * 4 * x.size


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 3 * 64), limit=st.integers(1, 64), seed=st.integers(0, 2**16))
def test_chunk_rebasing(n, limit, seed):
    x = np.random.default_rng(seed).standard_normal(n).astype(np.float32)
    cfg = CompressionConfig(small_threshold=1, chunk_limit=max(limit, -(-n // 3)), sample_size=64)
    p = compress(shard(x), cfg)
    offsets = [c.base_offset for c in p.chunks]
    assert offsets == list(range(0, n, cfg.chunk_limit))
    for c in p.chunks:
        assert c.indices.size == 0 or c.indices.max() < cfg.chunk_limit
    want, _ = oracles.dense_reference(x, p.threshold)
    assert decompress(p).tobytes() == want.tobytes()
    assert decompress(decode(encode(p))[0]).tobytes() == want.tobytes()


def test_deterministic():
    x = np.random.default_rng(1).standard_normal(200_000).astype(np.float32)
    cfg = CompressionConfig(seed=5)
    assert encode(compress(shard(x, 2, 9), cfg)) == encode(compress(shard(x, 2, 9), cfg))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), ks=st.lists(st.floats(0.001, 1.0), min_size=2, max_size=4))
def test_monotone_in_k(seed, ks):
    x = np.random.default_rng(seed).standard_normal(120_000).astype(np.float32)
    counts = [compress(shard(x), CompressionConfig(k=k, seed=seed)).kept for k in sorted(ks)]
    assert counts == sorted(counts)


@pytest.mark.parametrize("kw", [dict(small_threshold=0), dict(k=0), dict(k=1.5), dict(sample_size=0),
                                dict(chunk_limit=0), dict(chunk_limit=2**31)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        CompressionConfig(**kw)


# -- wire format --------------------------------------------------------------

def golden_payloads():
    q = QuantizedDense(np.array([64, -127, 32, 0], np.int8), 1 / 127)
    sc = SparseChunks((
        SparseChunk(0, np.array([1.0, -0.5], np.float16), np.array([1, 3], np.int32)),
        SparseChunk(4, np.zeros(0, np.float16), np.zeros(0, np.int32)),
        SparseChunk(8, np.array([2.0], np.float16), np.array([1], np.int32)),
    ), 10, 0.5)
    raw = RawDense(np.array([1.0, -2.5, 3.25], np.float32))
    return {"quantized.bin": q, "sparse.bin": sc, "raw.bin": raw}


@pytest.mark.parametrize("name", ["quantized.bin", "sparse.bin", "raw.bin"])
def test_golden_encode_decode(name):
    payload = golden_payloads()[name]
    data = (GOLDEN / name).read_bytes()
    assert encode(payload) == data
    back, end = decode(data)
    assert end == len(data) and back == payload


def test_golden_sparse_dense():
    back, _ = decode((GOLDEN / "sparse.bin").read_bytes())
    assert decompress(back).tolist() == [0, 1.0, 0, -0.5, 0, 0, 0, 0, 0, 2.0]


def sparse_bytes(chunks, length=8):
    out = struct.pack("<BQdI", 1, length, 0.5, len(chunks))
    for base, vals, idx in chunks:
        out += struct.pack("<QI", base, len(vals)) + struct.pack(f"<{len(vals)}e", *vals)
        out += struct.pack(f"<{len(idx)}i", *idx)
    return out


@pytest.mark.parametrize("data", [
    b"",
    b"\x07",
    (GOLDEN / "quantized.bin").read_bytes()[:-1],
    (GOLDEN / "sparse.bin").read_bytes()[:30],
    (GOLDEN / "raw.bin").read_bytes()[:12],
])
def test_decode_truncated_or_unknown(data):
    with pytest.raises(CorruptionError):
        decode(data)


@pytest.mark.parametrize("chunks", [
    [(0, [1.0], [8])],  # index outside the only chunk
    [(0, [1.0], [-1])],
    [(0, [1.0, 2.0], [2, 2])],  # duplicate position
    [(0, [1.0], [0]), (0, [1.0], [1])],  # overlapping chunk ranges
    [(2, [1.0], [0])],  # does not start at 0
    [(0, [1.0], [3]), (4, [1.0], [5])],  # index past the next chunk's base
])
def test_decompress_rejects_bad_sparse(chunks):
    payload, _ = decode(sparse_bytes(chunks))
    with pytest.raises(CorruptionError):
        decompress(payload)


def test_decode_offset_chaining():
    a, b = golden_payloads()["raw.bin"], golden_payloads()["quantized.bin"]
    buf = encode(a) + encode(b)
    p1, pos = decode(buf)
    p2, end = decode(buf, pos)
    assert (p1, p2, end) == (a, b, len(buf))
    assert math.isclose(p2.scale, 1 / 127)
