"""Consensus on the recoverable state, cascade loading and fused replay.

Consensus picks the newest base version every rank can obtain from some
surviving tier, then the furthest iteration every rank can reach through a
contiguous chain of diff batches from that anchor. Sources are chosen in
fixed cost order Tier-1, designated peer Tier-2, an equivalent shard on a
surviving intra-cluster rank, then Tier-3. Tier-3 reads go through one
leader per node.

Replay applies each batch of ``N`` gradients as one fused pass over the
first ``N - 1`` updates followed by a native optimizer step, so the result is
bit-identical to replaying every step on its own.
"""
from __future__ import annotations

import json
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcomp, kernels
from .errors import CorruptionError, NotFoundError, ProtocolError, UnavailableError, UnrecoverableError
from .events import EventLog
from .state import AdamHyper, GradientShard, TrainingState, adam_step, broadcast_weights, restore_states, step_coefficients
from .tierstore import BaseKey, DiffBatch, DiffKey, RankCatalog, Tier, TierCatalog, TierStore
from .topology import Links, Topology

TIER1, TIER2, PEER, TIER3 = "tier1", "tier2", "peer", "tier3"
SOURCE_ORDER = (TIER1, TIER2, PEER, TIER3)
_TIER_LABEL = {Tier.TIER1: TIER1, Tier.TIER2: TIER2, Tier.TIER3: TIER3}


@dataclass(frozen=True)
class AvailabilityTuple:
    version: int
    s1: bool
    s2: bool
    s3: bool

    @property
    def bits(self) -> tuple[int, int, int]:
        return int(self.s1), int(self.s2), int(self.s3)


def _rank_catalogs(catalogs) -> dict[int, RankCatalog]:
    if isinstance(catalogs, TierCatalog):
        return dict(catalogs.ranks)
    return dict(catalogs)


def classify(version: int, catalogs, rank: int) -> AvailabilityTuple:
    tiers = _rank_catalogs(catalogs)[rank].bases.get(version, frozenset())
    return AvailabilityTuple(version, Tier.TIER1 in tiers, Tier.TIER2 in tiers, Tier.TIER3 in tiers)


def reachable(cat: RankCatalog, anchor: int) -> dict[int, DiffKey | None]:
    """Step counts reachable from ``anchor`` through stored batches, with the batch that got there."""
    by_start = defaultdict(list)
    for (s, e) in cat.diff_ranges():
        by_start[s].append(e)
    parent: dict[int, DiffKey | None] = {anchor: None}
    queue = deque([anchor])
    while queue:
        t = queue.popleft()
        for e in sorted(by_start.get(t, ())):
            if e + 1 not in parent:
                parent[e + 1] = DiffKey(t, e)
                queue.append(e + 1)
    return parent


def chain(cat: RankCatalog, anchor: int, end: int) -> list[DiffKey]:
    parent = reachable(cat, anchor)
    if end not in parent:
        raise UnrecoverableError(f"no contiguous diff chain from {anchor} to {end}")
    keys = []
    t = end
    while t != anchor:
        key = parent[t]
        keys.append(key)
        t = key.start
    return keys[::-1]


def consensus(catalogs) -> tuple[int, int]:
    """``(anchor, replay_end)``: the newest base every rank can load, then the furthest common chain end."""
    cats = _rank_catalogs(catalogs)
    if not cats:
        raise UnrecoverableError("no ranks reported")
    common = None
    for cat in cats.values():
        versions = cat.base_versions()
        common = versions if common is None else common & versions
    if not common:
        raise UnrecoverableError("no base version is obtainable by every rank")
    anchor = max(common)
    ends = None
    for cat in cats.values():
        r = set(reachable(cat, anchor))
        ends = r if ends is None else ends & r
    return anchor, max(ends)


# -- planning -----------------------------------------------------------------

@dataclass(frozen=True)
class Source:
    label: str  # one of SOURCE_ORDER
    via_rank: int | None = None  # rank whose equivalent shard is read, for PEER


@dataclass
class RecoveryPlan:
    anchor: int
    replay_end: int
    base_sources: dict  # rank -> Source
    diff_sources: dict  # rank -> list[(DiffKey, Source)]
    leader_fetches: dict  # node -> list[(key, rank)], Tier-3 files read by that node's leader
    fallback_used: str

    @property
    def chain_length(self) -> int:
        return self.replay_end - self.anchor


def _pick(tiers, equivalent: int | None = None) -> Source | None:
    if Tier.TIER1 in tiers:
        return Source(TIER1)
    if Tier.TIER2 in tiers:
        return Source(TIER2)
    if equivalent is not None:
        return Source(PEER, equivalent)
    if Tier.TIER3 in tiers:
        return Source(TIER3)
    return None


def plan_loading(anchor: int, replay_end: int, catalogs, topology: Topology,
                 equivalents: dict | None = None) -> RecoveryPlan:
    """Cheapest surviving source per object.

    ``equivalents`` maps a rank to surviving ranks holding a bit-identical copy of
    its base shard. Optimizer partitions live on exactly one rank under the
    sharded layout, so the simulator passes an empty mapping.
    """
    if replay_end < anchor:
        raise ProtocolError(f"replay_end {replay_end} precedes anchor {anchor}")
    cats = _rank_catalogs(catalogs)
    equivalents = equivalents or {}
    base_sources = {}
    diff_sources = {}
    leader = defaultdict(list)
    worst = 0
    for rank in sorted(cats):
        cat = cats[rank]
        eq = next((r for r in equivalents.get(rank, ()) if anchor in cats[r].bases), None)
        src = _pick(cat.bases.get(anchor, frozenset()), eq)
        if src is None:
            raise UnrecoverableError(f"rank {rank}: base {anchor} not obtainable")
        base_sources[rank] = src
        worst = max(worst, SOURCE_ORDER.index(src.label))
        node = topology.node_of(rank)
        if src.label == TIER3:
            leader[node].append((BaseKey(anchor), rank))
        diffs = []
        for key in chain(cat, anchor, replay_end):
            dsrc = _pick(cat.diffs[(key.start, key.end)])
            diffs.append((key, dsrc))
            if dsrc.label == TIER3:
                leader[node].append((key, rank))
        diff_sources[rank] = diffs
    return RecoveryPlan(anchor, replay_end, base_sources, diff_sources,
                        {n: v for n, v in sorted(leader.items())}, SOURCE_ORDER[worst])


# -- loading ------------------------------------------------------------------

@dataclass
class Loaded:
    base_payloads: dict  # rank -> bytes
    batches: dict  # rank -> list[DiffBatch]
    base_bytes: dict  # (node, label) -> bytes
    diff_bytes: dict  # (node, label) -> bytes

    def bytes_by_tier(self) -> dict:
        out = {label: 0 for label in SOURCE_ORDER}
        for table in (self.base_bytes, self.diff_bytes):
            for (_node, label), n in table.items():
                out[label] += n
        return out


def _fetch(store: TierStore, src: Source, rank: int, key) -> bytes:
    if src.label == PEER:
        return store.get_bytes(Tier.TIER1, src.via_rank, key)
    tier = {TIER1: Tier.TIER1, TIER2: Tier.TIER2, TIER3: Tier.TIER3}[src.label]
    return store.get_bytes(tier, rank, key)


def execute(plan: RecoveryPlan, store: TierStore, topology: Topology) -> Loaded:
    """Read every planned object. Tier-3 reads are issued per node leader, in plan order."""
    base_payloads = {}
    batches = defaultdict(list)
    base_bytes = defaultdict(int)
    diff_bytes = defaultdict(int)
    t3 = {}
    for node, items in plan.leader_fetches.items():
        for key, rank in items:
            t3[(key, rank)] = store.get_bytes(Tier.TIER3, rank, key)
    for rank, src in plan.base_sources.items():
        key = BaseKey(plan.anchor)
        data = t3[(key, rank)] if src.label == TIER3 else _fetch(store, src, rank, key)
        base_payloads[rank] = data
        base_bytes[(topology.node_of(rank), src.label)] += len(data)
    for rank, items in plan.diff_sources.items():
        for key, src in items:
            data = t3[(key, rank)] if src.label == TIER3 else _fetch(store, src, rank, key)
            batch = DiffBatch.from_bytes(data)
            if batch.rank != rank or batch.key != key:
                raise CorruptionError(f"rank {rank}: fetched {batch.key} of rank {batch.rank} for {key}")
            batches[rank].append(batch)
            diff_bytes[(topology.node_of(rank), src.label)] += len(data)
    return Loaded(base_payloads, dict(batches), dict(base_bytes), dict(diff_bytes))


def load(store: TierStore, topology: Topology, equivalents: dict | None = None,
         log: EventLog | None = None, now: float = 0.0) -> tuple[RecoveryPlan, Loaded]:
    """Catalog, consensus, plan and fetch; a vanished source triggers one replan."""
    last = None
    for attempt in range(2):
        catalog = store.catalog()
        anchor, replay_end = consensus(catalog)
        plan = plan_loading(anchor, replay_end, catalog, topology, equivalents)
        try:
            return plan, execute(plan, store, topology)
        except (NotFoundError, UnavailableError) as exc:
            last = exc
            if log is not None:
                log.emit(now, "replan", None, 0, anchor, attempt=attempt, reason=str(exc))
    raise UnrecoverableError(f"planned source vanished twice: {last}")


# -- replay -------------------------------------------------------------------

def fused_replay(states: list[TrainingState], batches: dict, hp: AdamHyper) -> list[TrainingState]:
    """Apply each rank's batches in lockstep; one fused pass plus one native step per batch."""
    states = [s.copy() for s in states]
    counts = {len(batches.get(s.rank, ())) for s in states}
    if len(counts) != 1:
        raise ProtocolError(f"ranks hold different numbers of diff batches: {sorted(counts)}")
    for j in range(counts.pop()):
        keys = {batches[s.rank][j].key for s in states}
        if len(keys) != 1:
            raise ProtocolError(f"batch {j} differs across ranks: {sorted(keys)}")
        stepped = []
        for s in states:
            batch = batches[s.rank][j]
            if batch.start_iter != s.step:
                raise ProtocolError(f"rank {s.rank}: gap in diff chain, batch starts at {batch.start_iter}, state at {s.step}")
            n = len(batch.payloads)
            grads = np.empty((n, s.shard_len), dtype=np.float32)
            for i, p in enumerate(batch.payloads):
                g = diffcomp.decompress(p)
                if g.shape != (s.shard_len,):
                    raise CorruptionError(f"rank {s.rank}: payload {batch.start_iter + i} decodes to {g.size} values, partition has {s.shard_len}")
                grads[i] = g
            if n > 1:
                coef = np.stack([step_coefficients(hp, s.step + i) for i in range(n - 1)])
                kernels.fused_adam(s.master_weights, s.moment1, s.moment2, grads[:n - 1], coef)
                s = replace(s, step=s.step + n - 1)
            final = GradientShard(iteration=s.step, rank=s.rank, values=grads[n - 1])
            stepped.append(adam_step(s, final, hp))
        states = broadcast_weights(stepped)
    return states


# -- cost model ---------------------------------------------------------------

@dataclass(frozen=True)
class ReplayCosts:
    compute_time: float = 0.5  # one training iteration
    fused_pass_time: float = 0.02  # one fused pass over the rank's partition
    native_step_time: float = 0.05  # native optimizer step plus broadcast


def _node_time(links: Links, table: dict, node: int, sequential: bool) -> float:
    parts = []
    for label, n in ((lbl, table.get((node, lbl), 0)) for lbl in SOURCE_ORDER):
        if (node, label) not in table:
            continue
        if label == TIER1:
            parts.append(links.probe_tier1 + n / links.local_bw)
        elif label in (TIER2, PEER):
            parts.append(links.probe_tier1 + links.probe_tier2 + n / links.intra_rack_bw)
        else:
            parts.append(links.probe_tier1 + links.probe_tier2 + links.probe_tier3
                         + links.tier3_latency + n / links.tier3_bw)
    if not parts:
        return 0.0
    return sum(parts) if sequential else max(parts)


def rollback_time(links: Links, loaded: Loaded, topology: Topology) -> dict[int, float]:
    """Per node: base shards load in parallel by source; each source pays the probes before it."""
    return {n.node_id: _node_time(links, loaded.base_bytes, n.node_id, False) for n in topology.nodes}


def diff_fetch_time(links: Links, loaded: Loaded, topology: Topology) -> dict[int, float]:
    return {n.node_id: _node_time(links, loaded.diff_bytes, n.node_id, True) for n in topology.nodes}


def rerun_time(costs: ReplayCosts, diff_fetch: float, n_batches: int, replay_end: int, failed_at: int) -> float:
    lost = max(0, failed_at - replay_end)
    return diff_fetch + n_batches * (costs.fused_pass_time + costs.native_step_time) + lost * costs.compute_time


def measure_recovery(records: list[dict]) -> dict[str, float]:
    """``t_rollback`` and ``t_rerun`` of the most recent recovery in an event log."""
    start = max((i for i, r in enumerate(records) if r["kind"] == "failure"), default=None)
    if start is None:
        raise ProtocolError("no failure in event log")
    tail = records[start:]
    rollback = [r["duration"] for r in tail if r["kind"] == "base_load"]
    diff = [r["duration"] for r in tail if r["kind"] == "diff_load"]
    replay = sum(r["duration"] for r in tail if r["kind"] == "replay")
    rerun = sum(r["duration"] for r in tail if r["kind"] == "rerun")
    return {"t_rollback": max(rollback, default=0.0), "t_rerun": max(diff, default=0.0) + replay + rerun}


# -- end to end ---------------------------------------------------------------

@dataclass
class RecoveryResult:
    states: list
    plan: RecoveryPlan
    loaded: Loaded
    report: dict = field(default_factory=dict)


def recover(store: TierStore, topology: Topology, hp: AdamHyper, failure_kind: str, failed_at: int,
            costs: ReplayCosts = ReplayCosts(), log: EventLog | None = None, now: float = 0.0,
            equivalents: dict | None = None) -> RecoveryResult:
    """Full recovery path; emits per-node load records and a ``recovery`` summary to ``log``."""
    plan, loaded = load(store, topology, equivalents, log, now)
    states = restore_states([loaded.base_payloads[r] for r in sorted(loaded.base_payloads)])
    if states[0].step != plan.anchor:
        raise CorruptionError(f"base {plan.anchor} deserializes to step {states[0].step}")
    states = fused_replay(states, loaded.batches, hp)
    links = topology.links
    rb = rollback_time(links, loaded, topology)
    df = diff_fetch_time(links, loaded, topology)
    n_batches = len(next(iter(plan.diff_sources.values()), ()))
    t_rollback = max(rb.values(), default=0.0)
    t_diff = max(df.values(), default=0.0)
    replay = n_batches * (costs.fused_pass_time + costs.native_step_time)
    rerun = max(0, failed_at - plan.replay_end) * costs.compute_time
    if log is not None:
        for node, d in rb.items():
            log.emit(now, "base_load", None, sum(v for (n, _), v in loaded.base_bytes.items() if n == node),
                     plan.anchor, node=node, duration=round(d, 9))
        for node, d in df.items():
            log.emit(now, "diff_load", None, sum(v for (n, _), v in loaded.diff_bytes.items() if n == node),
                     plan.anchor, node=node, duration=round(d, 9))
        for node, items in plan.leader_fetches.items():
            log.emit(now, "leader_fetch", None, 0, plan.anchor, node=node, files=len(items))
        log.emit(now, "replay", None, 0, plan.anchor, batches=n_batches, duration=round(replay, 9))
        log.emit(now, "rerun", None, 0, plan.anchor, iterations=max(0, failed_at - plan.replay_end),
                 duration=round(rerun, 9))
    report = {
        "failure_kind": failure_kind,
        "anchor": plan.anchor,
        "replay_end": plan.replay_end,
        "fallback_used": plan.fallback_used,
        "t_rollback_sim": round(t_rollback, 9),
        "t_rerun_sim": round(t_diff + replay + rerun, 9),
        "bytes_by_tier": loaded.bytes_by_tier(),
    }
    if log is not None:
        log.emit(now, "recovery", None, sum(report["bytes_by_tier"].values()), plan.anchor, **{
            k: v for k, v in report.items() if k != "anchor"})
    return RecoveryResult(states, plan, loaded, report)


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True)


__all__ = [
    "AvailabilityTuple", "Loaded", "RecoveryPlan", "RecoveryResult", "ReplayCosts", "Source",
    "SOURCE_ORDER", "chain", "classify", "consensus", "diff_fetch_time", "execute", "fused_replay",
    "load", "measure_recovery", "plan_loading", "reachable", "recover", "report_json",
    "rerun_time", "rollback_time",
]
