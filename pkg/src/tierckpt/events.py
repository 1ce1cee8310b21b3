"""Virtual clock, ordered background events, and the JSON-lines event log."""
from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Callable


@dataclass(order=True)
class _Entry:
    at: float
    seq: int
    fn: Callable = field(compare=False)
    args: tuple = field(compare=False, default=())
    cancelled: bool = field(compare=False, default=False)


class EventLoop:
    """Single-threaded discrete-event queue; ties break by scheduling order."""

    def __init__(self, now: float = 0.0):
        self.now = now
        self._heap: list[_Entry] = []
        self._seq = itertools.count()

    def schedule(self, at: float, fn: Callable, *args) -> _Entry:
        entry = _Entry(max(at, self.now), next(self._seq), fn, args)
        heapq.heappush(self._heap, entry)
        return entry

    @staticmethod
    def cancel(entry: _Entry | None) -> None:
        if entry is not None:
            entry.cancelled = True

    def run_until(self, t: float) -> None:
        while self._heap and self._heap[0].at <= t:
            entry = heapq.heappop(self._heap)
            if entry.cancelled:
                continue
            self.now = max(self.now, entry.at)
            entry.fn(*entry.args)
        self.now = max(self.now, t)

    def advance(self, dt: float) -> None:
        self.run_until(self.now + dt)

    def pending(self) -> int:
        return sum(1 for e in self._heap if not e.cancelled)


class EventLog:
    """Structured records; serialization is deterministic for identical runs."""

    def __init__(self):
        self.records: list[dict[str, Any]] = []

    def emit(self, t: float, kind: str, rank: int | None = None, bytes: int = 0,
             version: int | None = None, **extra) -> dict:
        rec = {"t": round(t, 9), "rank": rank, "kind": kind, "bytes": int(bytes), "version": version}
        rec.update(extra)
        self.records.append(rec)
        return rec

    def of_kind(self, *kinds: str) -> list[dict]:
        return [r for r in self.records if r["kind"] in kinds]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, default=_jsonable) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


def _jsonable(obj):
    if hasattr(obj, "item"):
        return obj.item()
    if isinstance(obj, (set, frozenset, tuple)):
        return sorted(obj) if isinstance(obj, (set, frozenset)) else list(obj)
    return str(obj)
