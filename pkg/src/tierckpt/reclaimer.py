"""Global watermark and coordinated cross-tier garbage collection.

The coordinator (global rank 0) advances ``W`` to the newest base version
whose Tier-3 directory is committed, i.e. every rank on every node has its
marker in place. After the broadcast each rank drops volatile diffs that end
before ``W``, volatile bases older than ``W`` and Tier-3 diffs older than one
further interval. Tier-3 bases older than ``W`` go too, so the persistent
tier keeps one anchor plus a one-interval diff tail.

Iteration convention: base ``V`` is the state with ``step == V`` and a diff
batch ``[s, e]`` holds the gradients of iterations ``s..e``, so it is needed
by any anchor ``<= e``. A batch is obsolete for anchor ``W`` when ``e + 1 <= W``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .events import EventLog
from .tierstore import BaseKey, DiffKey, Tier, TierStore


@dataclass(frozen=True)
class Watermark:
    version: int | None
    advanced_at: float = 0.0


def compute_watermark(committed: set, prior: int | None = None) -> int | None:
    """Max committed base version, never below ``prior``."""
    versions = [k.version for k in committed if isinstance(k, BaseKey)]
    best = max(versions, default=None)
    if prior is None:
        return best
    return prior if best is None else max(prior, best)


def committed_map(store: TierStore) -> dict[str, dict[str, bool]]:
    """Per Tier-3 base version: node id -> every rank on that node has its marker."""
    keys = sorted(k for k in store.tier3.keys() if isinstance(k, BaseKey))
    out = {}
    for key in keys:
        present = store.tier3.markers(key)
        out[str(key.version)] = {
            str(n.node_id): all(r in present for r in n.ranks) for n in store.topology.nodes
        }
    return out


def is_obsolete(tier: Tier, key, watermark: int | None, interval: int) -> bool:
    """Would the watermark policy already have reclaimed ``key`` from ``tier``?"""
    if watermark is None:
        return False
    if isinstance(key, BaseKey):
        return key.version < watermark
    if tier == Tier.TIER3:
        return key.end + 1 <= watermark - interval
    return key.end + 1 <= watermark


def reclaim_rank(store: TierStore, rank: int, watermark: int, reason: str = "watermark") -> list:
    """Volatile GC for one rank after a broadcast of ``watermark``."""
    deleted = []
    for tier in (Tier.TIER1, Tier.TIER2):
        for key in sorted(store.volatile_keys(tier, rank), key=_order):
            if is_obsolete(tier, key, watermark, 0) and store.delete(tier, rank, key, reason):
                deleted.append((tier, rank, key))
    return deleted


def reclaim_tier3(store: TierStore, watermark: int, interval: int, reason: str = "watermark") -> list:
    """Coordinator-side Tier-3 GC: bases below ``W``; diffs outside the one-interval tail."""
    deleted = []
    for key in sorted(store.tier3.keys() | store.tier3.committed_keys(), key=_order):
        if is_obsolete(Tier.TIER3, key, watermark, interval) and store.delete_tier3(key, reason):
            deleted.append((Tier.TIER3, None, key))
    return deleted


def naive_reclaim(store: TierStore, rank: int, local_version: int) -> list:
    """Local-age policy: on producing base ``V`` a rank purges its own older chain from Tiers 1-2."""
    deleted = []
    for tier in (Tier.TIER1, Tier.TIER2):
        for key in sorted(store.volatile_keys(tier, rank), key=_order):
            old = key.version < local_version if isinstance(key, BaseKey) else key.end + 1 <= local_version
            if old and store.delete(tier, rank, key, "naive"):
                deleted.append((tier, rank, key))
    return deleted


def _order(key):
    return (0, key.version, 0) if isinstance(key, BaseKey) else (1, key.start, key.end)


@dataclass
class Reclaimer:
    """Coordinator state: the broadcast watermark and its trace."""

    store: TierStore
    interval: int
    log: EventLog | None = None
    policy: str = "watermark"
    watermark: Watermark = field(default_factory=lambda: Watermark(None))
    trace: list = field(default_factory=list)
    history: list = field(default_factory=list)  # (t, W) per broadcast

    def __post_init__(self):
        if self.policy not in ("watermark", "naive"):
            raise ValueError(f"reclaim policy must be watermark or naive, got {self.policy!r}")

    @property
    def W(self) -> int | None:
        return self.watermark.version

    def advance(self, now: float) -> Watermark | None:
        """Coordinator step; returns the new watermark when it moved."""
        new = compute_watermark(self.store.tier3.committed_keys(), self.W)
        if new is None or new == self.W:
            return None
        self.watermark = Watermark(new, now)
        self.history.append((now, new))
        self.trace.append({"t": round(now, 9), "W": new, "committed_map": committed_map(self.store)})
        if self.log is not None:
            self.log.emit(now, "watermark", 0, 0, new)
        return self.watermark

    def on_broadcast(self, now: float) -> list:
        """GC on every live rank plus the coordinator's Tier-3 sweep."""
        W = self.W
        if W is None:
            return []
        deleted = []
        if self.policy == "watermark":
            for rank in range(self.store.topology.world):
                deleted += reclaim_rank(self.store, rank, W)
        deleted += reclaim_tier3(self.store, W, self.interval)
        if self.log is not None and deleted:
            self.log.emit(now, "reclaim", None, 0, W, objects=len(deleted))
        return deleted

    def step(self, now: float) -> list:
        if self.advance(now) is None:
            return []
        return self.on_broadcast(now)

    def on_local_base(self, rank: int, version: int) -> list:
        if self.policy != "naive":
            return []
        return naive_reclaim(self.store, rank, version)

    def obsolete(self, tier: Tier, key) -> bool:
        """Objects arriving late that GC has already passed by are dropped on arrival."""
        if self.policy == "naive":
            return False
        if tier == Tier.TIER3:
            return is_obsolete(tier, key, self.W, self.interval)
        return is_obsolete(tier, key, self.W, 0)

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.trace)


__all__ = [
    "DiffKey", "Reclaimer", "Watermark", "committed_map", "compute_watermark", "is_obsolete",
    "naive_reclaim", "reclaim_rank", "reclaim_tier3",
]
