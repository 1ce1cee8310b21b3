"""Save path: per-iteration differential batches and paced base-checkpoint replication.

Differential stream: every iteration's gradient shard is compressed and
appended to the rank's open batch; a full batch of ``batch_len`` payloads is
sealed, written to Tier-1, sent to the ring peer's Tier-2 and queued for
Tier-3.

Base stream: at each base interval the rank's shard is serialized once and
the same byte buffer goes to Tier-1, the chunk scheduler (Tier-2) and the
Tier-3 upload queue. Chunks are paced one per iteration; if chunks remain
when the next base is generated they are drained in one blocking
``sync_flush`` that is charged as foreground stall.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from . import diffcomp
from .diffcomp import CompressionConfig
from .errors import ConfigError, ProtocolError
from .events import EventLog, EventLoop
from .state import GradientShard, TrainingState, serialize_shard
from .tierstore import BaseKey, BaseShard, DiffBatch, DiffKey, Tier, TierStore
from .topology import Topology

MiB = 1 << 20
GiB = 1 << 30


def default_safety_margin(interval: int) -> int:
    return math.ceil(0.1 * interval)


@dataclass(frozen=True)
class ChunkPlan:
    total_bytes: int
    interval_iters: int
    safety_margin_iters: int
    chunk_cap_bytes: int
    chunk_bytes: int
    iters_scheduled: int
    spillover: bool


def plan_chunks(total_bytes: int, interval: int, margin: int, cap: int) -> ChunkPlan:
    """Spread ``total_bytes`` evenly over ``interval - margin`` iterations, capped at ``cap`` per chunk."""
    if interval < 1:
        raise ConfigError(f"plan_chunks: interval must be >= 1, got {interval}")
    if cap < 1:
        raise ConfigError(f"plan_chunks: chunk cap must be >= 1, got {cap}")
    window = max(1, interval - margin)
    if total_bytes <= 0:
        return ChunkPlan(0, interval, margin, cap, 0, 0, False)
    chunk = min(cap, -(-total_bytes // window))
    iters = -(-total_bytes // chunk)
    return ChunkPlan(total_bytes, interval, margin, cap, chunk, iters, iters > window)


def peer_map(topology: Topology) -> dict[int, tuple[int, int]]:
    """rank -> (peer node, peer rank); ranks in single-node racks are absent."""
    out = {}
    for r in range(topology.world):
        p = topology.peer_of(r)
        if p is not None:
            out[r] = p
    return out


@dataclass(frozen=True)
class SaverConfig:
    base_interval: int = 50
    batch_len: int = 5
    safety_margin: int | None = None
    chunk_cap: int = 256 * MiB
    compression: CompressionConfig = field(default_factory=CompressionConfig)

    def __post_init__(self):
        if self.base_interval < 1:
            raise ConfigError(f"base_interval: must be >= 1, got {self.base_interval}")
        if self.batch_len < 1:
            raise ConfigError(f"batch_len: must be >= 1, got {self.batch_len}")
        if self.base_interval % self.batch_len:
            raise ConfigError(
                f"base_interval: must be a multiple of batch_len ({self.batch_len}), got {self.base_interval}")
        if self.safety_margin is not None and not 0 <= self.safety_margin < self.base_interval:
            raise ConfigError(f"safety_margin: must be in [0, base_interval), got {self.safety_margin}")
        if self.chunk_cap < 1:
            raise ConfigError(f"chunk_cap: must be >= 1, got {self.chunk_cap}")

    @property
    def margin(self) -> int:
        return default_safety_margin(self.base_interval) if self.safety_margin is None else self.safety_margin


@dataclass
class _Replication:
    rank: int
    version: int
    peer_node: int
    data: bytes
    obj_id: int
    plan: ChunkPlan
    sent: int = 0
    arrived: int = 0
    link_free: float = 0.0
    done: bool = False
    failed: bool = False
    arrivals: list = field(default_factory=list)

    @property
    def active(self) -> bool:
        return not (self.done or self.failed)


@dataclass
class _Upload:
    rank: int
    key: object
    node: int
    entry: object = None


class Saver:
    """Save path for every rank of one simulated cluster."""

    def __init__(self, topology: Topology, store: TierStore, loop: EventLoop, log: EventLog,
                 cfg: SaverConfig, on_tier3_marker: Callable | None = None,
                 is_obsolete: Callable | None = None, on_base: Callable | None = None):
        self.topology = topology
        self.store = store
        self.loop = loop
        self.log = log
        self.cfg = cfg
        self.links = topology.links
        self.on_tier3_marker = on_tier3_marker or (lambda key, rank: None)
        self.is_obsolete = is_obsolete or (lambda tier, key: False)
        self.on_base_hook = on_base or (lambda rank, version: None)
        self.open: dict[int, list] = {r: [] for r in range(topology.world)}
        self.open_start: dict[int, int | None] = {r: None for r in range(topology.world)}
        self.replications: dict[int, _Replication] = {}
        self.failed_replications: list[tuple[int, int]] = []
        self._t3_free: dict[int, float] = {n.node_id: 0.0 for n in topology.nodes}
        self._uploads: dict[int, list[_Upload]] = {n.node_id: [] for n in topology.nodes}
        self._t2_inflight: list = []  # (entry, src_node, dst_node, rank, key)
        self.link_bytes = {"intra_rack": 0, "tier3": 0}

    # -- differential stream ----------------------------------------------

    def on_iteration(self, rank: int, grad: GradientShard) -> DiffBatch | None:
        """Compress and append; seal and dispatch once ``batch_len`` payloads accumulate."""
        if grad.rank != rank:
            raise ProtocolError(f"gradient for rank {grad.rank} handed to rank {rank}")
        start = self.open_start[rank]
        if start is None:
            start = self.open_start[rank] = grad.iteration
        expected = start + len(self.open[rank])
        if grad.iteration != expected:
            raise ProtocolError(f"rank {rank}: gradient {grad.iteration} but open batch expects {expected}")
        self.open[rank].append(diffcomp.compress(grad, self.cfg.compression))
        if len(self.open[rank]) < self.cfg.batch_len:
            return None
        batch = DiffBatch(rank=rank, start_iter=start, end_iter=grad.iteration, payloads=tuple(self.open[rank]))
        self.open[rank] = []
        self.open_start[rank] = None
        self._dispatch_diff(batch)
        return batch

    def _dispatch_diff(self, batch: DiffBatch) -> None:
        now = self.loop.now
        data = batch.to_bytes()
        rank, key = batch.rank, batch.key
        obj_id = self.store.new_id()
        self.store.put_bytes(Tier.TIER1, rank, key, data, obj_id)
        self.log.emit(now, "diff_seal", rank, len(data), None, start=key.start, end=key.end)
        peer = self.topology.peer_of(rank)
        if peer is not None:
            arrive = now + len(data) / self.links.intra_rack_bw
            self.link_bytes["intra_rack"] += len(data)
            src = self.topology.node_of(rank)
            entry = self.loop.schedule(arrive, self._t2_arrive, rank, key, data, obj_id)
            self._t2_inflight.append((entry, src, peer[0], rank, key))
        self.upload_tier3(rank, key, data, obj_id)

    def _t2_arrive(self, rank, key, data, obj_id):
        if self.is_obsolete(Tier.TIER2, key):
            return
        if self.store.node_alive(self.topology.peer_of(rank)[0]):
            self.store.put_bytes(Tier.TIER2, rank, key, data, obj_id)

    # -- base stream ------------------------------------------------------

    def intercept_base(self, rank: int, state: TrainingState, version: int) -> BaseShard:
        """Serialize the rank's shard once and place that buffer in Tier-1."""
        if version % self.cfg.base_interval:
            raise ProtocolError(f"base version {version} is not a multiple of {self.cfg.base_interval}")
        if version != state.step:
            raise ProtocolError(f"base version {version} but state is at step {state.step}")
        shard = BaseShard(version=version, rank=rank, payload=serialize_shard(state))
        return shard

    def pending_flush(self) -> bool:
        return any(rep.active for rep in self.replications.values())

    def sync_flush(self) -> float:
        """Drain unfinished replications; returns the foreground stall."""
        now = self.loop.now
        stall = 0.0
        for rank, rep in sorted(self.replications.items()):
            if not rep.active:
                continue
            remaining = rep.plan.total_bytes - rep.sent
            wait = max(0.0, rep.link_free - now) + remaining / self.links.intra_rack_bw
            stall = max(stall, wait)
            for entry in rep.arrivals:
                self.loop.cancel(entry)
            self.link_bytes["intra_rack"] += remaining
            rep.sent = rep.arrived = rep.plan.total_bytes
            self._complete_replica(rep)
            self.log.emit(now, "sync_flush", rank, remaining, rep.version, stall=round(wait, 9))
        return stall

    def on_base(self, states: list[TrainingState], version: int) -> float:
        """Generate base ``version`` on every rank; returns any sync-flush stall (already incurred)."""
        stall = 0.0
        if self.pending_flush():
            stall = self.sync_flush()
            self.loop.advance(stall)
        now = self.loop.now
        shards = {}
        for st in states:
            shard = self.intercept_base(st.rank, st, version)
            obj_id = self.store.new_id()
            self.store.put_bytes(Tier.TIER1, st.rank, shard.key, shard.payload, obj_id)
            shards[st.rank] = (shard, obj_id)
            self.log.emit(now, "base_intercept", st.rank, shard.size, version)
        pmap = peer_map(self.topology)
        self.replications = {}
        for rank, (shard, obj_id) in sorted(shards.items()):
            if rank in pmap:
                total = max(shard.size, shards[pmap[rank][1]][0].size)
                self.log.emit(now, "size_exchange", rank, total, version, peer_rank=pmap[rank][1])
                plan = plan_chunks(shard.size, self.cfg.base_interval, self.cfg.margin, self.cfg.chunk_cap)
                if total != shard.size:
                    # both directions pace by the larger payload
                    bilateral = plan_chunks(total, self.cfg.base_interval, self.cfg.margin, self.cfg.chunk_cap)
                    chunk = bilateral.chunk_bytes
                    plan = ChunkPlan(shard.size, plan.interval_iters, plan.safety_margin_iters, plan.chunk_cap_bytes,
                                     chunk, -(-shard.size // chunk), bilateral.spillover)
                self.replications[rank] = _Replication(
                    rank=rank, version=version, peer_node=pmap[rank][0], data=shard.payload,
                    obj_id=obj_id, plan=plan, link_free=now)
            self.upload_tier3(rank, shard.key, shard.payload, obj_id)
            self.on_base_hook(rank, version)
        return stall

    def pump_replication(self, rank: int) -> int:
        """Send this iteration's chunk for the rank's active replication; returns bytes sent."""
        rep = self.replications.get(rank)
        if rep is None or not rep.active or rep.sent >= rep.plan.total_bytes:
            return 0
        now = self.loop.now
        if not self.store.node_alive(rep.peer_node):
            self._fail_replication(rep, "peer down")
            return 0
        n = min(rep.plan.chunk_bytes, rep.plan.total_bytes - rep.sent)
        start = max(now, rep.link_free)
        arrive = start + n / self.links.intra_rack_bw
        rep.link_free = arrive
        rep.sent += n
        self.link_bytes["intra_rack"] += n
        rep.arrivals.append(self.loop.schedule(arrive, self._chunk_arrive, rep, n))
        self.log.emit(now, "chunk", rank, n, rep.version, arrive=round(arrive, 9))
        return n

    def _chunk_arrive(self, rep: _Replication, n: int) -> None:
        if not rep.active:
            return
        rep.arrived += n
        if rep.arrived >= rep.plan.total_bytes:
            self._complete_replica(rep)

    def _complete_replica(self, rep: _Replication) -> None:
        rep.done = True
        key = BaseKey(rep.version)
        if self.is_obsolete(Tier.TIER2, key) or not self.store.node_alive(rep.peer_node):
            return
        # all-or-nothing: the replica becomes visible only once every byte is there
        self.store.put_bytes(Tier.TIER2, rep.rank, key, rep.data, rep.obj_id)
        self.log.emit(self.loop.now, "replica_complete", rep.rank, len(rep.data), rep.version)

    def _fail_replication(self, rep: _Replication, why: str) -> None:
        if not rep.active:
            return
        rep.failed = True
        for entry in rep.arrivals:
            self.loop.cancel(entry)
        self.failed_replications.append((rep.rank, rep.version))
        self.log.emit(self.loop.now, "replication_failed", rep.rank, rep.sent, rep.version, reason=why)

    # -- tier 3 -----------------------------------------------------------

    def upload_tier3(self, rank: int, key, data: bytes, obj_id: int) -> None:
        """Queue on the node's Tier-3 link; the marker is written when the transfer completes."""
        node = self.topology.node_of(rank)
        if self.store.tier3.has(key, rank) or any(u.rank == rank and u.key == key for u in self._uploads[node]):
            return  # re-intercepted after recovery: the bytes are already there or on their way
        now = self.loop.now
        self.link_bytes["tier3"] += len(data)
        start = max(now, self._t3_free[node])
        done = start + self.links.tier3_latency + len(data) / self.links.tier3_bw
        self._t3_free[node] = done
        self.store.tier3.stage(key, rank, data)
        up = _Upload(rank=rank, key=key, node=node)
        up.entry = self.loop.schedule(done, self._t3_done, up, len(data), obj_id)
        self._uploads[node].append(up)

    def _t3_done(self, up: _Upload, nbytes: int, obj_id: int) -> None:
        self._uploads[up.node].remove(up)
        if self.is_obsolete(Tier.TIER3, up.key):
            self.store.tier3.discard_staged(up.key, up.rank)
            return
        self.store.tier3.publish(up.key, up.rank, obj_id)
        version = up.key.version if isinstance(up.key, BaseKey) else None
        extra = {} if version is not None else {"start": up.key.start, "end": up.key.end}
        self.log.emit(self.loop.now, "t3_upload", up.rank, nbytes, version, **extra)
        self.on_tier3_marker(up.key, up.rank)

    # -- failures ---------------------------------------------------------

    def fail_nodes(self, nodes) -> None:
        """Abort every transfer touching ``nodes``; staged Tier-3 bytes are discarded."""
        nodes = set(nodes)
        now = self.loop.now
        for node in nodes:
            for up in self._uploads[node]:
                self.loop.cancel(up.entry)
                self.store.tier3.discard_staged(up.key, up.rank)
                self.log.emit(now, "t3_discard", up.rank, 0, getattr(up.key, "version", None), key=str(up.key))
            self._uploads[node] = []
            self._t3_free[node] = now
        keep = []
        for item in self._t2_inflight:
            entry, src, dst, _rank, _key = item
            if src in nodes or dst in nodes:
                self.loop.cancel(entry)
            elif not entry.cancelled:
                keep.append(item)
        self._t2_inflight = keep
        for rep in self.replications.values():
            if self.topology.node_of(rep.rank) in nodes or rep.peer_node in nodes:
                self._fail_replication(rep, "node failure")
        for r in range(self.topology.world):
            if self.topology.node_of(r) in nodes:
                self.open[r] = []
                self.open_start[r] = None

    def abort_paced_replication(self) -> None:
        """Training processes died: the per-iteration chunk pacing stops with them."""
        for rep in self.replications.values():
            self._fail_replication(rep, "process restart")

    def cancel_keys(self, predicate: Callable) -> None:
        """Drop queued transfers of objects that recovery has invalidated."""
        for node, ups in self._uploads.items():
            keep = []
            for up in ups:
                if predicate(up.key):
                    self.loop.cancel(up.entry)
                    self.store.tier3.discard_staged(up.key, up.rank)
                else:
                    keep.append(up)
            self._uploads[node] = keep
        keep = []
        for item in self._t2_inflight:
            if predicate(item[4]):
                self.loop.cancel(item[0])
            elif not item[0].cancelled:
                keep.append(item)
        self._t2_inflight = keep
        for rep in self.replications.values():
            if predicate(BaseKey(rep.version)):
                self._fail_replication(rep, "invalidated by recovery")

    def reset_open_batches(self) -> None:
        for r in self.open:
            self.open[r] = []
            self.open_start[r] = None

    def prune_inflight(self) -> None:
        self._t2_inflight = [i for i in self._t2_inflight if not i[0].cancelled and i[0].at > self.loop.now]


__all__ = [
    "ChunkPlan", "DiffKey", "GiB", "MiB", "Saver", "SaverConfig",
    "default_safety_margin", "peer_map", "plan_chunks",
]
