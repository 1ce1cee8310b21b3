"""End-to-end acceptance criteria, one test per criterion.

The session summary printed by conftest lists one PASS/FAIL line per test.
"""
import dataclasses
import itertools
import math
import time

import numpy as np
import pytest

from tierckpt.config import FailureEvent, Scenario
from tierckpt.diffcomp import (
    CompressionConfig, QuantizedDense, SparseChunks, compress, decompress, payload_size, quantize,
)
from tierckpt.errors import UnrecoverableError
from tierckpt.recovery import consensus, fused_replay, measure_recovery
from tierckpt.saver import GiB, MiB, SaverConfig, plan_chunks
from tierckpt.simulator import cluster_digest, run
from tierckpt.state import AdamHyper, GradientShard, init_states, partition, shard_size
from tierckpt.tierstore import DiffBatch, RankCatalog, Tier
from tierckpt.topology import Links

import oracles

KINDS = ("software", "node", "rack")


def timed(budget):
    """Fail the test if its body overruns ``budget`` seconds."""
    class _T:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, *exc):
            self.elapsed = time.perf_counter() - self.t0
            if exc[0] is None:
                assert self.elapsed < budget, f"took {self.elapsed:.1f}s, budget {budget}s"
    return _T()


def failure(kind, at, i, racks=((2, 2), (2, 2))):
    if kind == "node":
        return FailureEvent(at, "node", node=i % sum(len(r) for r in racks))
    if kind == "rack":
        return FailureEvent(at, "rack", rack=i % len(racks))
    return FailureEvent(at, "software")


def watermark_at(result, t):
    ws = [w["W"] for w in result.watermark_trace if w["t"] <= t]
    return ws[-1] if ws else None


# -- 1. lossless exact recovery ---------------------------------------------

def test_c1_lossless_exact_recovery(tmp_path):
    with timed(300):
        base = Scenario(iterations=500, lossless=True)
        ref = run(base, tmp_path / "ref", record_all_digests=True)
        ats = sorted(np.random.default_rng(1).choice(np.arange(1, 500), 20, replace=False).tolist())
        for kind in KINDS:
            sc = dataclasses.replace(base, failures=tuple(failure(kind, at, i) for i, at in enumerate(ats)))
            res = run(sc, tmp_path / kind)
            assert res.unrecoverable is None
            assert len(res.metrics.recoveries) == 20
            recovered = [c for c in res.checkpoints if c[0] == "recovered"]
            resumed = [c for c in res.checkpoints if c[0] == "resumed"]
            assert [c[1] for c in resumed] == ats
            for _label, step, digest in recovered + resumed:
                assert digest == ref.digests[step], (kind, step)
            assert cluster_digest(res.states) == cluster_digest(ref.states)


# -- 2. fused == sequential -----------------------------------------------------

@pytest.mark.parametrize("phi", [1 << 10, 1 << 20])
def test_c2_fused_equals_sequential(phi):
    hp = AdamHyper()
    world, steps, segment = 4, 100, 10
    ranges = partition(phi, world)
    cfg = CompressionConfig(seed=3)
    with timed(60):
        for n in (1, 2, 5, 10):
            states = init_states(phi, world)
            fp16 = states[0].fp16_weights
            masters = [s.master_weights for s in states]
            ms = [s.moment1 for s in states]
            vs = [s.moment2 for s in states]
            rng = np.random.default_rng(n)
            # the chain is fed in ten-step segments so Φ = 2^20 fits in memory
            for s0 in range(0, steps, segment):
                payloads = [[compress(GradientShard(s0 + j, r, rng.standard_normal(hi - lo).astype(np.float32)), cfg)
                             for r, (lo, hi) in enumerate(ranges)] for j in range(segment)]
                grads = [[decompress(p) for p in row] for row in payloads]
                batches = {r: [chain_batch(r, s0 + b, [payloads[b + j][r] for j in range(n)])
                               for b in range(0, segment, n)] for r in range(world)}
                states = fused_replay(states, batches, hp)
                fp16, masters, ms, vs = oracles.sequential_replay(fp16, masters, ms, vs, ranges, grads, s0, hp)
                for r, st_ in enumerate(states):
                    assert st_.step == s0 + segment
                    assert st_.fp16_weights.tobytes() == fp16.tobytes()
                    assert st_.master_weights.tobytes() == masters[r].tobytes()
                    assert st_.moment1.tobytes() == ms[r].tobytes()
                    assert st_.moment2.tobytes() == vs[r].tobytes()


def chain_batch(rank, start, payloads):
    return DiffBatch(rank, start, start + len(payloads) - 1, tuple(payloads))


# -- 3. compression ratio ---------------------------------------------------------

def test_c3_compression_ratio():
    n = 10 ** 6
    cfg = CompressionConfig(k=0.01)
    for seed in range(50):
        x = np.random.default_rng(seed).standard_normal(n).astype(np.float32)
        p = compress(GradientShard(seed, 0, x), dataclasses.replace(cfg, seed=seed))
        assert isinstance(p, SparseChunks)
        assert payload_size(p) <= 0.02 * 4 * n
        assert 0.005 * n <= p.kept <= 0.02 * n
        # the kept entries are exactly those at or above the stored threshold
        _dense, keep = oracles.dense_reference(x, p.threshold)
        assert p.kept == keep.size
    for seed in range(50):
        x = (np.random.default_rng(seed).standard_normal(5000) * 10 ** (seed % 7 - 3)).astype(np.float32)
        q = quantize(x)
        assert isinstance(q, QuantizedDense)
        err = np.abs(decompress(q).astype(np.float64) - x.astype(np.float64))
        assert np.all(err <= np.float64(q.scale) / 2 * (1 + 1e-6))


# -- 4. convergence analog ------------------------------------------------------------

def test_c4_convergence_with_lossy_recovery(tmp_path):
    with timed(300):
        base = Scenario(phi=1 << 12, iterations=10_000, record_footprint=False,
                        saver=SaverConfig(base_interval=50, batch_len=5))
        clean = run(base, tmp_path / "clean")
        events = tuple(failure(KINDS[i % 3], at, i) for i, at in enumerate(range(1000, 10_000, 1000)))
        hit = run(dataclasses.replace(base, failures=events), tmp_path / "hit")
        assert len(hit.metrics.recoveries) == 9 and hit.unrecoverable is None
        assert hit.states[0].step == 10_000
        assert abs(hit.final_loss - clean.final_loss) <= 0.05 * clean.final_loss
        assert clean.final_loss < 0.5 * clean.metrics.loss[0][1]


# -- 5. watermark safety --------------------------------------------------------------

def random_links(rng):
    return Links(
        intra_rack_bw=float(10 ** rng.uniform(4, 10)),
        tier3_bw=float(10 ** rng.uniform(3, 9.5)),
        tier3_latency=float(rng.uniform(0, 3)),
        probe_tier3=float(rng.uniform(0, 1)),
    )


def test_c5_watermark_safety(tmp_path):
    with timed(600):
        layouts = (((2, 2), (2, 2)), ((1, 1), (2,)))
        refs = {racks: run(Scenario(phi=1 << 10, iterations=100, lossless=True, record_footprint=False, racks=racks),
                           tmp_path / f"ref{j}", record_all_digests=True) for j, racks in enumerate(layouts)}
        rng = np.random.default_rng(2024)
        violations = []
        recoveries = 0
        for i in range(1000):
            racks = layouts[0] if i % 3 else layouts[1]
            count = int(rng.integers(1, 5))
            ats = sorted(rng.choice(np.arange(1, 100), count, replace=False).tolist())
            kinds = rng.choice(KINDS, count).tolist()
            sc = Scenario(
                phi=1 << 10, iterations=100, lossless=bool(i % 2 == 0), record_footprint=False, racks=racks,
                links=random_links(rng), saver=SaverConfig(base_interval=20, batch_len=int(rng.choice([1, 2, 5]))),
                failures=tuple(failure(k, at, int(rng.integers(0, 8)), racks) for k, at in zip(kinds, ats)),
            )
            res = run(sc, tmp_path / f"s{i}")
            recoveries += len(res.metrics.recoveries)
            if not res.safety_ok():
                violations.append((i, "self-check", res.metrics.safety, res.unrecoverable))
                continue
            fails = res.log.of_kind("failure")
            for f, rep in zip(fails, res.metrics.recoveries):
                W = watermark_at(res, f["t"])
                if W is not None and (rep["anchor"] is None or rep["anchor"] < W):
                    violations.append((i, "below watermark", W, rep))
            if sc.lossless:
                for label, step, digest in res.checkpoints:
                    if digest != refs[racks].digests[step]:
                        violations.append((i, label, step))
        assert violations == []
        assert recoveries >= 1000


def figure5_scenario(policy):
    # one rack of two nodes; Tier-3 commits of base 100 and diff batch 95..99 lag past the failure
    return Scenario(phi=1 << 12, iterations=110, lossless=True, racks=((1, 1),), reclaim_policy=policy,
                    links=Links(tier3_latency=2.0), failures=(FailureEvent(101, "node", node=0),))


def test_c5_naive_policy_breaks_chain(tmp_path):
    ref = run(dataclasses.replace(figure5_scenario("watermark"), failures=()), tmp_path / "ref",
              record_all_digests=True)
    good = run(figure5_scenario("watermark"), tmp_path / "wm")
    rep = good.metrics.recoveries[0]
    assert good.safety_ok()
    # W is still 50; the peer copies of diffs 50..99 survive and carry the chain to base 100
    assert (rep["watermark"], rep["anchor"], rep["replay_end"]) == (50, 50, 100)
    assert rep["fallback_used"] == "tier2"
    assert [c for c in good.checkpoints if c[0] == "resumed"] == [("resumed", 101, ref.digests[101])]
    bad = run(figure5_scenario("naive"), tmp_path / "naive")
    rep = bad.metrics.recoveries[0]
    # the fast node purged its chain at local base 100, so only the bare Tier-3 anchor and the
    # batches already committed there remain
    assert rep["anchor"] == 50 and rep["replay_end"] < 100
    assert rep["fallback_used"] == "tier3"
    assert ("recovered", 100, ref.digests[100]) not in bad.checkpoints


# -- 6. storage bound -----------------------------------------------------------------

def test_c6_storage_bound(tmp_path):
    I = 50
    sc = Scenario(phi=1 << 16, iterations=500, saver=SaverConfig(base_interval=I, batch_len=5))
    res = run(sc, tmp_path)
    world = sc.topology().world
    B = shard_size((1 << 16) // world)
    D = {}
    for r in res.log.of_kind("diff_seal"):
        k = (r["rank"], r["start"] // I)
        D[k] = D.get(k, 0) + r["bytes"]
    Dmax = {rank: max(v for (r, _), v in D.items() if r == rank) for rank in range(world)}
    fp = res.metrics.footprint
    for tier in (Tier.TIER1, Tier.TIER2, Tier.TIER3):
        tail = 1 if tier == Tier.TIER3 else 0
        for rank in range(world):
            series = [table[(tier, rank)] for _s, _t, table in fp]
            d = Dmax[rank]
            assert max(series) <= 2 * B + (2 + tail) * d, (tier, rank)
            for k in range(1, 500 // I):
                window = series[k * I + 1:(k + 1) * I + 1]
                assert min(window) <= B + (1 + tail) * d, (tier, rank, k)
            # sawtooth: every stretch longer than one period contains a drop
            for start in range(I, len(series) - I - 1):
                seg = series[start:start + I + 2]
                assert any(b < a for a, b in zip(seg, seg[1:])), (tier, rank, start)


# -- 7. consensus oracle ----------------------------------------------------------------

def check_consensus(bases, diffs):
    """``bases[r]`` and ``diffs[r]`` are the sets available to rank r; tiers rotate over the copies."""
    tiers = (Tier.TIER1, Tier.TIER2, Tier.TIER3)
    cats = {r: RankCatalog(bases={v: frozenset([tiers[(r + i) % 3]]) for i, v in enumerate(sorted(bases[r]))},
                           diffs={k: frozenset([tiers[(r + i) % 3]]) for i, k in enumerate(sorted(diffs[r]))})
            for r in range(4)}
    want = oracles.consensus_bruteforce({r: (bases[r], diffs[r]) for r in range(4)})
    try:
        got = consensus(cats)
    except UnrecoverableError:
        got = None
    return got == want, want


def test_c7_consensus_matches_bruteforce():
    versions = (0, 10, 20)
    with timed(120):
        cases = 0
        # every base pattern over 4 ranks x 3 versions, each with 16 rank-uniform diff sets
        ranges_a = ((0, 9), (10, 14), (15, 19), (20, 24))
        for mask in range(1 << 12):
            bases = [{v for j, v in enumerate(versions) if mask >> (3 * r + j) & 1} for r in range(4)]
            for dm in range(16):
                d = {rg for j, rg in enumerate(ranges_a) if dm >> j & 1}
                ok, want = check_consensus(bases, [d] * 4)
                assert ok, (bases, d, want)
                cases += 1
        # every combination of per-rank diff sets with all bases present
        ranges_b = ((20, 24), (25, 29), (20, 29), (30, 34))
        full = [set(versions)] * 4
        for mask in range(1 << 16):
            diffs = [{rg for j, rg in enumerate(ranges_b) if mask >> (4 * r + j) & 1} for r in range(4)]
            ok, want = check_consensus(full, diffs)
            assert ok, (diffs, want)
            cases += 1
        assert cases == (1 << 12) * 16 + (1 << 16)


# -- 8. scheduler contract --------------------------------------------------------------

def test_c8_no_stall_with_bandwidth(tmp_path):
    res = run(Scenario(phi=1 << 16, iterations=500), tmp_path)
    assert res.metrics.total_stall == 0.0
    assert not res.log.of_kind("sync_flush")
    done = {(r["version"], r["rank"]) for r in res.log.of_kind("replica_complete")}
    assert done == {(v, r) for v in range(0, 500, 50) for r in range(8)}


def test_c8_throttled_one_flush_per_interval(tmp_path):
    size = shard_size((1 << 14) // 8)
    sc = Scenario(phi=1 << 14, iterations=100,
                  saver=SaverConfig(base_interval=10, batch_len=5, chunk_cap=size // 20))
    res = run(sc, tmp_path)
    flushes = res.log.of_kind("sync_flush")
    per = {}
    for r in flushes:
        per.setdefault(r["version"], []).append(r["rank"])
    assert sorted(per) == list(range(0, 90, 10))
    assert all(sorted(ranks) == list(range(8)) for ranks in per.values())
    complete = {(r["version"], r["rank"]): r["bytes"] for r in res.log.of_kind("replica_complete")}
    for v in per:
        for rank in range(8):
            assert complete[(v, rank)] == size
    assert not res.log.of_kind("replication_failed")


def test_c8_chunk_grid():
    grid = itertools.product([0, 1, MiB, GiB, 20 * GiB, 3 * GiB + 7], [2, 10, 50, 100],
                             [0, 1, 5], [MiB, 256 * MiB, 2 * GiB])
    for P, I, s, C in grid:
        p = plan_chunks(P, I, s, C)
        if P == 0:
            assert p.iters_scheduled == 0
            continue
        assert p.chunk_bytes == min(C, math.ceil(P / max(1, I - s)))
    p = plan_chunks(GiB, 50, 5, 256 * MiB)
    assert math.ceil(p.chunk_bytes / MiB) == 23


# -- 9. recovery-cost ordering ----------------------------------------------------------

def test_c9_recovery_cost_ordering(tmp_path):
    links = Links()
    t = {}
    for i, kind in enumerate(KINDS):
        # 97 = base 50 + 47: every replica of base 50 has landed
        sc = Scenario(phi=1 << 16, iterations=100, failures=(failure(kind, 97, 1),))
        res = run(sc, tmp_path / kind)
        assert res.metrics.recoveries[0]["fallback_used"] == ("tier1", "tier2", "tier3")[i]
        t[kind] = measure_recovery(res.log.records)["t_rollback"]
    assert t["software"] < t["node"] < t["rack"]
    assert t["rack"] >= links.probe_tier1 + links.probe_tier2 + links.probe_tier3
