"""Three storage tiers behind one interface.

Tier-1 and Tier-2 are in-process byte maps owned by each node; a node wipe
drops both, including the replicas it hosts for its ring predecessor.
Tier-3 is a real directory::

    root/_layout.json
    root/base/v{V}/rank{r}.bin   rank{r}.done   _COMMITTED
    root/diff/{start}_{end}/rank{r}.bin   rank{r}.done   _COMMITTED
    root/staging/...             (uploads in progress, same relative layout)

An object becomes visible to recovery only once ``_COMMITTED`` exists in its
directory, and that marker is written only after every rank's ``.done``.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import os
import re
import shutil
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

from . import diffcomp
from .errors import CorruptionError, IntegrityError, NotFoundError, ProtocolError, UnavailableError
from .topology import Topology

COMMITTED = "_COMMITTED"
LAYOUT = "_layout.json"


class Tier(IntEnum):
    TIER1 = 1
    TIER2 = 2
    TIER3 = 3


@dataclass(frozen=True, order=True)
class BaseKey:
    version: int

    @property
    def relpath(self) -> str:
        return f"base/v{self.version}"

    def __str__(self):
        return f"base@{self.version}"


@dataclass(frozen=True, order=True)
class DiffKey:
    start: int
    end: int  # inclusive iteration index

    @property
    def relpath(self) -> str:
        return f"diff/{self.start}_{self.end}"

    def __str__(self):
        return f"diff[{self.start},{self.end}]"


ObjectKey = BaseKey | DiffKey


@dataclass(frozen=True)
class BaseShard:
    version: int
    rank: int
    payload: bytes

    @property
    def key(self) -> BaseKey:
        return BaseKey(self.version)

    @property
    def size(self) -> int:
        return len(self.payload)

    def to_bytes(self) -> bytes:
        return self.payload


_DIFF_HEAD = struct.Struct("<4sIIQQI")
_DIFF_MAGIC = b"TCDB"


@dataclass(frozen=True)
class DiffBatch:
    rank: int
    start_iter: int
    end_iter: int
    payloads: tuple

    def __post_init__(self):
        if self.end_iter - self.start_iter + 1 != len(self.payloads):
            raise ProtocolError(
                f"diff batch [{self.start_iter}, {self.end_iter}] holds {len(self.payloads)} payloads")

    @property
    def key(self) -> DiffKey:
        return DiffKey(self.start_iter, self.end_iter)

    def to_bytes(self) -> bytes:
        parts = [_DIFF_HEAD.pack(_DIFF_MAGIC, 1, self.rank, self.start_iter, self.end_iter, len(self.payloads))]
        parts.extend(diffcomp.encode(p) for p in self.payloads)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "DiffBatch":
        if len(data) < _DIFF_HEAD.size:
            raise CorruptionError("diff batch shorter than header")
        magic, fmt, rank, start, end, count = _DIFF_HEAD.unpack_from(data)
        if magic != _DIFF_MAGIC or fmt != 1:
            raise CorruptionError(f"bad diff batch header {magic!r} v{fmt}")
        pos = _DIFF_HEAD.size
        payloads = []
        for _ in range(count):
            p, pos = diffcomp.decode(data, pos)
            payloads.append(p)
        if pos != len(data):
            raise CorruptionError(f"diff batch has {len(data) - pos} trailing bytes")
        return cls(rank=rank, start_iter=start, end_iter=end, payloads=tuple(payloads))


def decode_object(key: ObjectKey, rank: int, data: bytes):
    if isinstance(key, BaseKey):
        return BaseShard(version=key.version, rank=rank, payload=data)
    return DiffBatch.from_bytes(data)


@dataclass
class _Stored:
    obj_id: int
    data: bytes


@dataclass
class _NodeMemory:
    alive: bool = True
    tier1: dict = field(default_factory=dict)  # rank -> {key: _Stored}
    tier2: dict = field(default_factory=dict)  # owner rank -> {key: _Stored}


@dataclass(frozen=True)
class RankCatalog:
    bases: dict  # version -> frozenset[Tier]
    diffs: dict  # (start, end) -> frozenset[Tier]

    def base_versions(self) -> set[int]:
        return {v for v, tiers in self.bases.items() if tiers}

    def diff_ranges(self) -> set[tuple[int, int]]:
        return {r for r, tiers in self.diffs.items() if tiers}


@dataclass(frozen=True)
class TierCatalog:
    ranks: dict  # rank -> RankCatalog
    tier3_committed: dict  # ObjectKey -> bool, every Tier-3 directory with at least one file

    def __getitem__(self, rank: int) -> RankCatalog:
        return self.ranks[rank]


def parse_relpath(rel: str) -> ObjectKey | None:
    m = re.fullmatch(r"base/v(\d+)", rel)
    if m:
        return BaseKey(int(m.group(1)))
    m = re.fullmatch(r"diff/(\d+)_(\d+)", rel)
    if m:
        return DiffKey(int(m.group(1)), int(m.group(2)))
    return None


class Tier3Store:
    """Persistent tier backed by a directory. Survives every wipe."""

    def __init__(self, root: str | os.PathLike, world: int, base_interval: int | None = None,
                 batch_len: int | None = None, write_layout: bool = True):
        self.root = Path(root)
        self.world = world
        self.root.mkdir(parents=True, exist_ok=True)
        self.layout = {"world": world, "base_interval": base_interval, "batch_len": batch_len}
        if write_layout:
            _atomic_write(self.root / LAYOUT, json.dumps(self.layout, sort_keys=True))
        self._ids: dict = {}  # (key, rank) -> obj_id, tracing only
        # (key, rank) -> bytes of the published .bin
        self._sizes, self._committed = self.scan()

    @classmethod
    def open(cls, root: str | os.PathLike) -> "Tier3Store":
        """Attach to an existing directory using the layout recorded in it."""
        root = Path(root)
        try:
            layout = json.loads((root / LAYOUT).read_text())
        except (OSError, ValueError) as exc:
            raise CorruptionError(f"{root / LAYOUT}: missing or unreadable layout ({exc})") from None
        return cls(root, layout["world"], layout.get("base_interval"), layout.get("batch_len"), write_layout=False)

    def _dir(self, key: ObjectKey) -> Path:
        return self.root / key.relpath

    def _staging(self, key: ObjectKey, rank: int) -> Path:
        return self.root / "staging" / key.relpath / f"rank{rank}.bin"

    def stage(self, key: ObjectKey, rank: int, data: bytes) -> None:
        path = self._staging(key, rank)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)

    def discard_staged(self, key: ObjectKey, rank: int) -> None:
        path = self._staging(key, rank)
        if path.exists():
            path.unlink()
        _prune_empty(path.parent, self.root)

    def publish(self, key: ObjectKey, rank: int, obj_id: int | None = None) -> None:
        """Move the staged bytes into place, then write this rank's marker."""
        src = self._staging(key, rank)
        if not src.exists():
            raise NotFoundError(f"nothing staged for {key} rank {rank}")
        d = self._dir(key)
        d.mkdir(parents=True, exist_ok=True)
        dst = d / f"rank{rank}.bin"
        os.replace(src, dst)
        _prune_empty(src.parent, self.root)
        data = dst.read_bytes()
        marker = {"size": len(data), "sha256": hashlib.sha256(data).hexdigest()}
        _atomic_write(d / f"rank{rank}.done", json.dumps(marker, sort_keys=True))
        self._sizes[(key, rank)] = len(data)
        if obj_id is not None:
            self._ids[(key, rank)] = obj_id

    def upload(self, key: ObjectKey, rank: int, data: bytes, obj_id: int | None = None) -> None:
        self.stage(key, rank, data)
        self.publish(key, rank, obj_id)

    def markers(self, key: ObjectKey) -> set[int]:
        d = self._dir(key)
        if not d.is_dir():
            return set()
        return {int(p.name[4:-5]) for p in d.glob("rank*.done")}

    def verify(self, key: ObjectKey, ranks=None) -> list[str]:
        """Problems with markers present in ``key``'s directory (empty list when sound)."""
        d = self._dir(key)
        problems = []
        for r in sorted(self.markers(key) if ranks is None else ranks):
            done = d / f"rank{r}.done"
            binp = d / f"rank{r}.bin"
            if not done.exists():
                problems.append(f"{key.relpath}: rank{r}.done missing")
                continue
            if not binp.exists():
                problems.append(f"{key.relpath}: rank{r}.bin missing")
                continue
            try:
                marker = json.loads(done.read_text())
            except ValueError:
                problems.append(f"{key.relpath}: rank{r}.done unreadable")
                continue
            data = binp.read_bytes()
            if len(data) != marker.get("size") or hashlib.sha256(data).hexdigest() != marker.get("sha256"):
                problems.append(f"{key.relpath}: rank{r}.bin does not match its marker")
        return problems

    def commit(self, key: ObjectKey) -> str:
        """Second phase: publish ``_COMMITTED`` iff every rank's marker exists."""
        d = self._dir(key)
        if (d / COMMITTED).exists():
            return "committed"
        present = self.markers(key)
        if present != set(range(self.world)):
            return "pending"
        problems = self.verify(key, range(self.world))
        if problems:
            raise IntegrityError("; ".join(problems))
        _atomic_write(d / COMMITTED, json.dumps({"world": self.world}, sort_keys=True))
        self._committed.add(key)
        return "committed"

    def is_committed(self, key: ObjectKey) -> bool:
        return key in self._committed

    def committed_keys(self) -> set:
        return set(self._committed)

    def has(self, key: ObjectKey, rank: int) -> bool:
        return (key, rank) in self._sizes

    def get(self, key: ObjectKey, rank: int) -> bytes:
        if key not in self._committed:
            raise NotFoundError(f"tier3: {key} is not committed")
        path = self._dir(key) / f"rank{rank}.bin"
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise NotFoundError(f"tier3: {path} missing") from None

    def obj_id(self, key: ObjectKey, rank: int) -> int | None:
        return self._ids.get((key, rank))

    def delete(self, key: ObjectKey) -> list[int]:
        """Drop a whole directory, marker first so it is never seen half-deleted as committed."""
        d = self._dir(key)
        self._committed.discard(key)
        removed = []
        if (d / COMMITTED).exists():
            (d / COMMITTED).unlink()
        for (k, r) in list(self._sizes):
            if k == key:
                del self._sizes[(k, r)]
                oid = self._ids.pop((k, r), None)
                if oid is not None:
                    removed.append(oid)
        if d.exists():
            shutil.rmtree(d)
        _prune_empty(d.parent, self.root)
        staging = self.root / "staging" / key.relpath
        if staging.exists():
            shutil.rmtree(staging)
            _prune_empty(staging.parent, self.root)
        return removed

    def keys(self) -> set:
        """Directories holding at least one published file."""
        return {k for (k, _r) in self._sizes}

    def rank_bytes(self, rank: int) -> int:
        return sum(size for (k, r), size in self._sizes.items() if r == rank)

    def index(self) -> tuple[dict, set]:
        return dict(self._sizes), set(self._committed)

    def scan(self) -> tuple[dict, set]:
        """Rebuild ``(sizes, committed)`` from the directory alone."""
        sizes = {}
        committed = set()
        for kind in ("base", "diff"):
            top = self.root / kind
            if not top.is_dir():
                continue
            for d in top.iterdir():
                key = parse_relpath(f"{kind}/{d.name}")
                if key is None:
                    continue
                for done in d.glob("rank*.done"):
                    r = int(done.name[4:-5])
                    binp = d / f"rank{r}.bin"
                    if binp.exists():
                        sizes[(key, r)] = binp.stat().st_size
                if (d / COMMITTED).exists():
                    committed.add(key)
        return sizes, committed


class TierStore:
    """Uniform put/get/wipe over the three tiers for one simulated cluster."""

    def __init__(self, topology: Topology, tier3_root: str | os.PathLike,
                 base_interval: int | None = None, batch_len: int | None = None):
        self.topology = topology
        self.tier3 = Tier3Store(tier3_root, topology.world, base_interval, batch_len)
        self._nodes = {n.node_id: _NodeMemory() for n in topology.nodes}
        self._ids = itertools.count(1)
        self.deleted_ids: set[tuple] = set()  # (obj_id, tier): one stored copy
        self.deletions: list[tuple] = []  # (obj_id, tier, rank, key, reason)
        self.fetches: list[tuple] = []  # (obj_id, tier, rank, key, committed)

    def new_id(self) -> int:
        return next(self._ids)

    # -- placement --------------------------------------------------------

    def _host(self, tier: Tier, rank: int) -> tuple[_NodeMemory, dict]:
        if tier == Tier.TIER1:
            mem = self._nodes[self.topology.node_of(rank)]
            table = mem.tier1
        elif tier == Tier.TIER2:
            peer = self.topology.peer_of(rank)
            if peer is None:
                raise UnavailableError(f"rank {rank} has no Tier-2 peer (single-node rack)")
            mem = self._nodes[peer[0]]
            table = mem.tier2
        else:
            raise ValueError("tier3 has no host node")
        if not mem.alive:
            raise UnavailableError(f"{tier.name} for rank {rank}: host node is down")
        return mem, table.setdefault(rank, {})

    def node_alive(self, node_id: int) -> bool:
        return self._nodes[node_id].alive

    def put(self, tier: Tier, obj) -> int:
        return self.put_bytes(tier, obj.rank, obj.key, obj.to_bytes())

    def put_bytes(self, tier: Tier, rank: int, key: ObjectKey, data: bytes, obj_id: int | None = None) -> int:
        obj_id = obj_id or self.new_id()
        if tier == Tier.TIER3:
            self.tier3.upload(key, rank, data, obj_id)
            return obj_id
        _mem, table = self._host(tier, rank)
        table[key] = _Stored(obj_id, data)
        return obj_id

    def has(self, tier: Tier, rank: int, key: ObjectKey) -> bool:
        if tier == Tier.TIER3:
            return self.tier3.is_committed(key) and self.tier3.has(key, rank)
        try:
            _mem, table = self._host(tier, rank)
        except UnavailableError:
            return False
        return key in table

    def get_bytes(self, tier: Tier, rank: int, key: ObjectKey) -> bytes:
        if tier == Tier.TIER3:
            data = self.tier3.get(key, rank)
            self.fetches.append((self.tier3.obj_id(key, rank), tier, rank, key, self.tier3.is_committed(key)))
            return data
        _mem, table = self._host(tier, rank)
        try:
            stored = table[key]
        except KeyError:
            raise NotFoundError(f"{tier.name} rank {rank}: {key} not present") from None
        self.fetches.append((stored.obj_id, tier, rank, key, True))
        return stored.data

    def get(self, tier: Tier, rank: int, key: ObjectKey):
        return decode_object(key, rank, self.get_bytes(tier, rank, key))

    def delete(self, tier: Tier, rank: int, key: ObjectKey, reason: str = "reclaim") -> bool:
        """Remove one volatile object; absent objects and down hosts are a no-op."""
        try:
            _mem, table = self._host(tier, rank)
        except UnavailableError:
            return False
        stored = table.pop(key, None)
        if stored is None:
            return False
        self.deleted_ids.add((stored.obj_id, tier))
        self.deletions.append((stored.obj_id, tier, rank, key, reason))
        return True

    def delete_tier3(self, key: ObjectKey, reason: str = "reclaim") -> bool:
        if key not in self.tier3.keys() and not (self.tier3.root / key.relpath).exists():
            return False
        for oid in self.tier3.delete(key):
            self.deleted_ids.add((oid, Tier.TIER3))
            self.deletions.append((oid, Tier.TIER3, None, key, reason))
        return True

    def volatile_keys(self, tier: Tier, rank: int) -> list:
        try:
            _mem, table = self._host(tier, rank)
        except UnavailableError:
            return []
        return list(table)

    # -- tier3 commit -----------------------------------------------------

    def commit_tier3(self, key: ObjectKey, coordinator_rank: int = 0) -> str:
        return self.tier3.commit(key)

    # -- failures ---------------------------------------------------------

    def wipe_node(self, node_id: int) -> None:
        mem = self._nodes[node_id]
        mem.tier1.clear()
        mem.tier2.clear()
        mem.alive = False

    def wipe_rack(self, rack_id: int) -> None:
        for node_id in self.topology.nodes_in_rack(rack_id):
            self.wipe_node(node_id)

    def wipe(self, scope: str, ident: int) -> None:
        if scope == "node":
            self.wipe_node(ident)
        elif scope == "rack":
            self.wipe_rack(ident)
        else:
            raise ValueError(f"wipe scope must be node or rack, got {scope!r}")

    def restore_node(self, node_id: int) -> None:
        """Bring a wiped node (or its replacement) back with empty volatile tiers."""
        self._nodes[node_id].alive = True

    # -- inventory --------------------------------------------------------

    def catalog(self, scan: bool = False) -> TierCatalog:
        sizes, committed = self.tier3.scan() if scan else self.tier3.index()
        t3_keys = {k for (k, _r) in sizes}
        ranks = {}
        for rank in range(self.topology.world):
            bases: dict = {}
            diffs: dict = {}

            def add(key, tier):
                if isinstance(key, BaseKey):
                    bases.setdefault(key.version, set()).add(tier)
                else:
                    diffs.setdefault((key.start, key.end), set()).add(tier)

            for tier in (Tier.TIER1, Tier.TIER2):
                for key in self.volatile_keys(tier, rank):
                    add(key, tier)
            for key in committed:
                if (key, rank) in sizes:
                    add(key, Tier.TIER3)
            ranks[rank] = RankCatalog(
                bases={v: frozenset(t) for v, t in bases.items()},
                diffs={r: frozenset(t) for r, t in diffs.items()},
            )
        return TierCatalog(ranks=ranks, tier3_committed={k: k in committed for k in t3_keys | committed})

    def footprint(self) -> dict:
        """Bytes held per (tier, rank); Tier-2 bytes are charged to the owning rank."""
        out = {}
        for rank in range(self.topology.world):
            for tier in (Tier.TIER1, Tier.TIER2):
                total = 0
                try:
                    _mem, table = self._host(tier, rank)
                    total = sum(len(s.data) for s in table.values())
                except UnavailableError:
                    pass
                out[(tier, rank)] = total
            out[(Tier.TIER3, rank)] = self.tier3.rank_bytes(rank)
        return out

    def object_bytes(self, tier: Tier, rank: int) -> dict:
        """Per-key byte sizes for one (tier, rank)."""
        if tier == Tier.TIER3:
            sizes, _ = self.tier3.index()
            return {k: s for (k, r), s in sizes.items() if r == rank}
        try:
            _mem, table = self._host(tier, rank)
        except UnavailableError:
            return {}
        return {k: len(s.data) for k, s in table.items()}


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _prune_empty(d: Path, stop: Path) -> None:
    d = Path(d)
    while d != stop and d.is_dir() and not any(d.iterdir()):
        d.rmdir()
        d = d.parent
