"""Deterministic cluster simulation: training loop, save path, failures, recovery.

One iteration at step ``t``:

1. fire failures scheduled at ``t`` (wipe, recover, truncate, rewind);
2. at a base boundary, drain unfinished replication (stall) and generate base ``t``;
3. train, then advance the clock by ``compute_time`` so background transfers run;
4. hand each rank's gradient to the saver and send one replication chunk per rank.

Tier-3 completions try the two-phase commit; a successful base commit moves
the watermark and triggers reclamation in the same event.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

from .config import FailureEvent, Scenario
from .errors import ConfigError, IntegrityError, UnrecoverableError
from .events import EventLog, EventLoop
from .reclaimer import Reclaimer
from .recovery import recover
from .saver import Saver
from .state import global_loss, init_states, train_step
from .tierstore import BaseKey, DiffKey, Tier, TierStore

log = logging.getLogger(__name__)


def cluster_digest(states) -> str:
    h = hashlib.sha256()
    for s in states:
        h.update(s.digest().encode())
    return h.hexdigest()


@dataclass
class Metrics:
    stall: list = field(default_factory=list)  # per executed iteration
    loss: list = field(default_factory=list)  # (step, loss)
    footprint: list = field(default_factory=list)  # (step, t, {(tier, rank): bytes})
    recoveries: list = field(default_factory=list)  # recovery reports
    link_bytes: dict = field(default_factory=dict)
    safety: list = field(default_factory=list)  # per recovery: dict of checks

    @property
    def total_stall(self) -> float:
        return sum(self.stall)


@dataclass
class SimResult:
    scenario: Scenario
    states: list
    metrics: Metrics
    log: EventLog
    watermark_trace: list
    digests: dict  # step -> cluster digest (last time the step was reached)
    checkpoints: list  # (label, step, digest): recovered / resumed states
    unrecoverable: str | None = None
    store: TierStore | None = None

    @property
    def final_loss(self) -> float:
        return self.metrics.loss[-1][1] if self.metrics.loss else float("nan")

    def safety_ok(self) -> bool:
        return self.unrecoverable is None and all(all(c.values()) for c in self.metrics.safety)

    def summary(self) -> dict:
        m = self.metrics
        return {
            "scenario": self.scenario.name,
            "seed": self.scenario.seed,
            "iterations": self.scenario.iterations,
            "final_step": self.states[0].step,
            "final_loss": self.final_loss,
            "failures": len(m.recoveries),
            "stall_total": round(m.total_stall, 9),
            "sync_flushes": len(self.log.of_kind("sync_flush")),
            "link_bytes": dict(m.link_bytes),
            "watermark": self.watermark_trace[-1]["W"] if self.watermark_trace else None,
            "unrecoverable": self.unrecoverable,
            "safety_ok": self.safety_ok(),
            "final_digest": cluster_digest(self.states),
        }


class Simulation:
    def __init__(self, scenario: Scenario, tier3_root, record_all_digests: bool = False):
        self.sc = scenario
        if not scenario.checkpointing and scenario.schedule():
            raise ConfigError("checkpoint.enabled: failures need checkpointing")
        self.topology = scenario.topology()
        self.loop = EventLoop()
        self.log = EventLog()
        self.record_all = record_all_digests
        cfg = scenario.saver
        root = Path(tier3_root)
        if root.exists():
            shutil.rmtree(root)
        self.store = TierStore(self.topology, root, cfg.base_interval, cfg.batch_len)
        self.reclaimer = Reclaimer(self.store, cfg.base_interval, self.log, scenario.reclaim_policy)
        self.saver = Saver(self.topology, self.store, self.loop, self.log, cfg,
                           on_tier3_marker=self._on_marker,
                           is_obsolete=self.reclaimer.obsolete,
                           on_base=self.reclaimer.on_local_base)
        self.states = init_states(scenario.phi, self.topology.world)
        self.metrics = Metrics()
        self.digests: dict = {}
        self.checkpoints: list = []
        self._announced: set = set()
        self._pending_resume: int | None = None

    # -- tier-3 coordinator ----------------------------------------------

    def _on_marker(self, key, rank):
        try:
            status = self.store.commit_tier3(key, 0)
        except IntegrityError as exc:
            self.log.emit(self.loop.now, "integrity_error", 0, 0, getattr(key, "version", None), reason=str(exc))
            return
        if status == "committed" and key not in self._announced:
            self._announced.add(key)
            extra = {} if isinstance(key, BaseKey) else {"start": key.start, "end": key.end}
            self.log.emit(self.loop.now, "t3_commit", 0, 0, getattr(key, "version", None), **extra)
            if isinstance(key, BaseKey):
                self.reclaimer.step(self.loop.now)

    # -- failures ---------------------------------------------------------

    def _inject(self, ev: FailureEvent) -> None:
        now = self.loop.now
        info = ev.as_dict()
        info["failure_kind"] = info.pop("kind")
        self.log.emit(now, "failure", None, 0, None, **info)
        if ev.kind == "software":
            nodes = []
        elif ev.kind == "node":
            nodes = [ev.node]
        else:
            nodes = list(self.topology.nodes_in_rack(ev.rack))
        # the relaunched job loses every process: paced chunk plans and open batches go with it
        self.saver.fail_nodes(nodes)
        self.saver.abort_paced_replication()
        self.saver.reset_open_batches()
        for n in nodes:
            self.store.wipe_node(n)
        for n in nodes:
            self.store.restore_node(n)
            self.log.emit(now, "node_restore", None, 0, None, node=n,
                          replaced=bool(ev.replace) if ev.kind == "node" else True)

    def _recover(self, ev: FailureEvent, failed_at: int) -> int:
        W = self.reclaimer.W
        now = self.loop.now
        try:
            res = recover(self.store, self.topology, self.sc.hp, ev.kind, failed_at,
                          self.sc.costs, self.log, now)
        except UnrecoverableError as exc:
            if W is not None:
                self.log.emit(now, "unrecoverable", None, 0, None, reason=str(exc))
                raise
            return self._cold_restart(ev, failed_at, str(exc))
        plan = res.plan
        fetched = {(f[0], f[1]) for f in self.store.fetches}
        self.metrics.safety.append({
            "anchor_ge_watermark": W is None or plan.anchor >= W,
            "only_committed_tier3": all(f[4] for f in self.store.fetches if f[1] == Tier.TIER3),
            "no_reclaimed_fetch": not (fetched & self.store.deleted_ids),
        })
        self.store.fetches.clear()
        rep = dict(res.report, failed_at=failed_at, watermark=W)
        self.metrics.recoveries.append(rep)
        self._truncate(plan.anchor, plan.replay_end)
        self.loop.advance(rep["t_rollback_sim"] + (rep["t_rerun_sim"] - self._rerun_part(rep, failed_at)))
        self.states = res.states
        self.checkpoints.append(("recovered", plan.replay_end, cluster_digest(self.states)))
        self._pending_resume = failed_at
        return plan.replay_end

    def _cold_restart(self, ev: FailureEvent, failed_at: int, reason: str) -> int:
        """Nothing was ever committed and the volatile copies are gone: start over from step 0."""
        self.log.emit(self.loop.now, "cold_restart", None, 0, 0, reason=reason)
        self.store.fetches.clear()
        self.metrics.safety.append({"anchor_ge_watermark": True, "only_committed_tier3": True,
                                    "no_reclaimed_fetch": True})
        self.metrics.recoveries.append({
            "failure_kind": ev.kind, "anchor": None, "replay_end": 0, "fallback_used": "cold_restart",
            "t_rollback_sim": 0.0, "t_rerun_sim": failed_at * self.sc.compute_time, "bytes_by_tier": {},
            "failed_at": failed_at, "watermark": None,
        })
        self._truncate(-1, 0)
        self.states = init_states(self.sc.phi, self.topology.world)
        self.checkpoints.append(("recovered", 0, cluster_digest(self.states)))
        self._pending_resume = failed_at
        return 0

    def _rerun_part(self, rep, failed_at):
        # re-executed iterations advance the clock through the training loop itself
        return max(0, failed_at - rep["replay_end"]) * self.sc.compute_time

    def _truncate(self, anchor: int, replay_end: int) -> None:
        """Drop everything the rewound run will regenerate."""
        def stale(key):
            if isinstance(key, BaseKey):
                return key.version > anchor
            return key.end + 1 > replay_end

        self.saver.cancel_keys(stale)
        for rank in range(self.topology.world):
            for tier in (Tier.TIER1, Tier.TIER2):
                for key in self.store.volatile_keys(tier, rank):
                    if stale(key):
                        self.store.delete(tier, rank, key, "truncate")
        for key in sorted(self.store.tier3.keys() | self.store.tier3.committed_keys(),
                          key=lambda k: (isinstance(k, DiffKey), str(k))):
            if stale(key):
                self.store.delete_tier3(key, "truncate")
                self._announced.discard(key)

    # -- main loop --------------------------------------------------------

    def run(self) -> SimResult:
        sc = self.sc
        interval = sc.saver.base_interval
        pending = sc.schedule()
        fired = 0
        t = 0
        unrecoverable = None
        self._snapshot(t)
        while t < sc.iterations:
            while fired < len(pending) and pending[fired].at_iteration == t:
                ev = pending[fired]
                fired += 1
                self._inject(ev)
                try:
                    t = self._recover(ev, t)
                except UnrecoverableError as exc:
                    unrecoverable = str(exc)
                    break
                self._snapshot(t)
            if unrecoverable:
                break
            if self._pending_resume is not None and t == self._pending_resume:
                self.checkpoints.append(("resumed", t, cluster_digest(self.states)))
                self._pending_resume = None
            stall = 0.0
            if sc.checkpointing and t % interval == 0:
                stall = self.saver.on_base(self.states, t)
            self.states, grads = train_step(self.states, sc.seed, sc.hp)
            self.loop.advance(sc.compute_time)
            if sc.checkpointing:
                for g in grads:
                    self.saver.on_iteration(g.rank, g)
                for r in range(self.topology.world):
                    self.saver.pump_replication(r)
            self.saver.prune_inflight()
            t += 1
            self.metrics.stall.append(stall)
            self._snapshot(t)
        if self._pending_resume is not None and t == self._pending_resume:
            self.checkpoints.append(("resumed", t, cluster_digest(self.states)))
        self.metrics.link_bytes = dict(self.saver.link_bytes)
        return SimResult(sc, self.states, self.metrics, self.log, self.reclaimer.trace,
                         self.digests, self.checkpoints, unrecoverable, self.store)

    def _snapshot(self, t: int) -> None:
        self.metrics.loss.append((t, global_loss(self.states, self.sc.seed)))
        if self.record_all or t in self.sc.digest_steps:
            self.digests[t] = cluster_digest(self.states)
        if self.sc.record_footprint:
            self.metrics.footprint.append((t, self.loop.now, self.store.footprint()))


def run(scenario: Scenario, tier3_root, record_all_digests: bool = False) -> SimResult:
    return Simulation(scenario, tier3_root, record_all_digests).run()


# -- outputs ------------------------------------------------------------------

def metrics_csv(result: SimResult) -> str:
    """One row per recorded step: clock, loss, stall, watermark, bytes per tier."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "step", "t", "loss", "stall", "tier1_bytes", "tier2_bytes", "tier3_bytes"])
    stalls = [0.0] + list(result.metrics.stall)
    fp = result.metrics.footprint
    loss = result.metrics.loss
    for i, (step, value) in enumerate(loss):
        tiers = [0, 0, 0]
        t = ""
        if i < len(fp):
            _step, t, table = fp[i]
            for (tier, _rank), n in table.items():
                tiers[int(tier) - 1] += n
            t = f"{t:.9f}"
        stall = stalls[i] if i < len(stalls) else 0.0
        w.writerow([i, step, t, f"{value:.9g}", f"{stall:.9f}", *tiers])
    return buf.getvalue()


def write_outputs(result: SimResult, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.log.write(out / "events.jsonl")
    (out / "metrics.csv").write_text(metrics_csv(result))
    (out / "watermark.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n"
                                                 for r in result.watermark_trace))
    (out / "recoveries.json").write_text(json.dumps(result.metrics.recoveries, sort_keys=True, indent=1))
    summary = result.summary()
    return summary
