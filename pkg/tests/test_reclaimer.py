import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from tierckpt.diffcomp import RawDense
from tierckpt.events import EventLog
from tierckpt.reclaimer import (
    Reclaimer, committed_map, compute_watermark, is_obsolete, naive_reclaim, reclaim_rank, reclaim_tier3,
)
from tierckpt.tierstore import BaseKey, BaseShard, DiffBatch, DiffKey, Tier, TierStore
from tierckpt.topology import Topology

import oracles


def topo():
    return Topology.build([[1, 1], [1, 1]])


def shard(rank, v):
    return BaseShard(v, rank, b"x" * 8)


def batch(rank, s, n=5):
    return DiffBatch(rank, s, s + n - 1, tuple(RawDense(np.zeros(1, np.float32)) for _ in range(n)))


def commit_everywhere(store, key_or_version, ranks=range(4)):
    for r in ranks:
        if isinstance(key_or_version, int):
            store.put(Tier.TIER3, shard(r, key_or_version))
        else:
            store.put(Tier.TIER3, batch(r, key_or_version.start))
    key = BaseKey(key_or_version) if isinstance(key_or_version, int) else key_or_version
    return store.commit_tier3(key)


def test_all_committed(tier3):
    store = TierStore(topo(), tier3, 50, 5)
    commit_everywhere(store, 50)
    rec = Reclaimer(store, 50)
    assert rec.advance(1.0).version == 50
    assert committed_map(store) == {"50": {"0": True, "1": True, "2": True, "3": True}}


def test_one_node_missing(tier3):
    store = TierStore(topo(), tier3, 50, 5)
    commit_everywhere(store, 0)
    assert commit_everywhere(store, 50, ranks=range(3)) == "pending"
    rec = Reclaimer(store, 50)
    rec.advance(0.0)
    assert rec.W == 0
    assert committed_map(store)["50"] == {"0": True, "1": True, "2": True, "3": False}


def test_compute_watermark_never_regresses():
    assert compute_watermark({BaseKey(0), DiffKey(0, 4)}, prior=50) == 50
    assert compute_watermark(set()) is None


@settings(max_examples=80, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(order=st.permutations([(v, r) for v in (0, 50, 100) for r in range(4)]),
       cut=st.integers(0, 12))
def test_watermark_trace_matches_oracle(tmp_path_factory, order, cut):
    store = TierStore(topo(), tmp_path_factory.mktemp("t3"), 50, 5)
    rec = Reclaimer(store, 50)
    markers = {}
    events = []
    trace = []
    for v, r in order[:cut]:
        store.put(Tier.TIER3, shard(r, v))
        store.commit_tier3(BaseKey(v))
        markers.setdefault(v, set()).add(r)
        events.append(("commit", v) if markers[v] == set(range(4)) else ("marker", v))
        rec.advance(float(len(events)))
        trace.append(rec.W)
    assert trace == oracles.watermark_trace(events)
    ws = [w for w in trace if w is not None]
    assert ws == sorted(ws)


def fill(store, upto=150, interval=50):
    for r in range(4):
        for v in range(0, upto + 1, interval):
            store.put(Tier.TIER1, shard(r, v))
            store.put(Tier.TIER2, shard(r, v))
        for s in range(0, upto, 5):
            store.put(Tier.TIER1, batch(r, s))
            store.put(Tier.TIER2, batch(r, s))
    for s in range(0, upto, 5):
        commit_everywhere(store, DiffKey(s, s + 4))


def test_reclaim_rank_rules(tier3):
    store = TierStore(topo(), tier3, 50, 5)
    fill(store)
    reclaim_rank(store, 1, 100)
    for tier in (Tier.TIER1, Tier.TIER2):
        keys = store.volatile_keys(tier, 1)
        assert sorted(k.version for k in keys if isinstance(k, BaseKey)) == [100, 150]
        assert min(k.start for k in keys if isinstance(k, DiffKey)) == 100
    assert len(store.volatile_keys(Tier.TIER1, 0)) == 4 + 30


def test_tier3_retention_w50(tier3):
    store = TierStore(topo(), tier3, 50, 5)
    fill(store)
    assert reclaim_tier3(store, 50, 50) == []


def test_tier3_retention_w100(tier3):
    store = TierStore(topo(), tier3, 50, 5)
    fill(store)
    commit_everywhere(store, 0)
    commit_everywhere(store, 100)
    deleted = reclaim_tier3(store, 100, 50)
    gone = {k for _t, _r, k in deleted}
    assert gone == {BaseKey(0)} | {DiffKey(s, s + 4) for s in range(0, 50, 5)}
    left = {k for k in store.tier3.committed_keys() if isinstance(k, DiffKey)}
    assert min(k.start for k in left) == 50


def test_unchanged_watermark_deletes_nothing(tier3):
    store = TierStore(topo(), tier3, 50, 5)
    fill(store)
    commit_everywhere(store, 50)
    rec = Reclaimer(store, 50, EventLog())
    assert rec.step(1.0)
    assert rec.step(2.0) == []
    assert len(rec.history) == 1


def test_is_obsolete():
    assert is_obsolete(Tier.TIER1, DiffKey(45, 49), 50, 0)
    assert not is_obsolete(Tier.TIER1, DiffKey(50, 54), 50, 0)
    assert not is_obsolete(Tier.TIER3, DiffKey(45, 49), 50, 50)
    assert is_obsolete(Tier.TIER3, DiffKey(45, 49), 100, 50)
    assert not is_obsolete(Tier.TIER2, BaseKey(50), 50, 0)
    assert not is_obsolete(Tier.TIER1, BaseKey(0), None, 0)


def test_naive_purges_own_chain(tier3):
    store = TierStore(topo(), tier3, 50, 5)
    fill(store, upto=100)
    naive_reclaim(store, 0, 100)
    keys = store.volatile_keys(Tier.TIER1, 0)
    assert keys == [BaseKey(100)]
    # the naive policy never consults W, so broadcasts only sweep Tier-3
    rec = Reclaimer(store, 50, policy="naive")
    assert not rec.obsolete(Tier.TIER1, DiffKey(0, 4))
    with pytest.raises(ValueError):
        Reclaimer(store, 50, policy="eager")
