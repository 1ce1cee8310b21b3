"""Scenario configuration: YAML in, validated dataclasses out.

Every validation message starts with the dotted path of the offending field,
for example ``failures.schedule[2].node: no such node 9``.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .diffcomp import CompressionConfig
from .errors import ConfigError
from .recovery import ReplayCosts
from .saver import SaverConfig
from .state import AdamHyper
from .topology import Links, Topology

TIER3_ROOT_ENV = "TIERCKPT_TIER3_ROOT"
FAILURE_KINDS = ("software", "node", "rack")


@dataclass(frozen=True)
class FailureEvent:
    at_iteration: int
    kind: str
    node: int | None = None
    rack: int | None = None
    replace: bool = True

    def as_dict(self) -> dict:
        d = {"at": self.at_iteration, "kind": self.kind}
        if self.kind == "node":
            d.update(node=self.node, replace=self.replace)
        elif self.kind == "rack":
            d["rack"] = self.rack
        return d


@dataclass(frozen=True)
class RandomFailures:
    count: int = 0
    kinds: tuple[str, ...] = FAILURE_KINDS
    min_gap: int = 1


@dataclass(frozen=True)
class Scenario:
    seed: int = 0
    phi: int = 1 << 20
    iterations: int = 500
    lossless: bool = False
    checkpointing: bool = True
    reclaim_policy: str = "watermark"
    tier3_root: str | None = None
    racks: tuple = ((2, 2), (2, 2))
    links: Links = field(default_factory=Links)
    compute_time: float = 0.5
    hp: AdamHyper = field(default_factory=AdamHyper)
    saver: SaverConfig = field(default_factory=lambda: SaverConfig(
        compression=CompressionConfig(chunk_limit=1 << 20)))
    costs: ReplayCosts = field(default_factory=ReplayCosts)
    failures: tuple[FailureEvent, ...] = ()
    random_failures: RandomFailures = field(default_factory=RandomFailures)
    record_footprint: bool = True
    digest_steps: tuple[int, ...] = ()
    name: str = "scenario"

    def __post_init__(self):
        # the run seed and lossless flag are the single source for the codec
        comp = self.saver.compression
        if comp.seed != self.seed or comp.lossless != self.lossless:
            comp = dataclasses.replace(comp, seed=self.seed, lossless=self.lossless)
            object.__setattr__(self, "saver", dataclasses.replace(self.saver, compression=comp))

    def topology(self) -> Topology:
        return Topology.build([list(r) for r in self.racks], self.links)

    def with_seed(self, seed: int) -> "Scenario":
        return dataclasses.replace(self, seed=seed)

    def resolved_tier3_root(self, out_dir: str | os.PathLike | None = None) -> Path:
        if self.tier3_root:
            return Path(self.tier3_root)
        env = os.environ.get(TIER3_ROOT_ENV)
        if env:
            return Path(env) / self.name / f"seed{self.seed}"
        if out_dir is None:
            raise ConfigError(f"tier3_root: not set, no {TIER3_ROOT_ENV} and no output directory")
        return Path(out_dir) / "tier3"

    def schedule(self) -> list[FailureEvent]:
        """Explicit failures plus any drawn from the run seed, ordered by iteration."""
        events = list(self.failures)
        rf = self.random_failures
        if rf.count:
            events += draw_failures(self.seed, self.iterations, self.topology(), rf)
        return sorted(events, key=lambda e: e.at_iteration)


def draw_failures(seed: int, iterations: int, topology: Topology, rf: RandomFailures) -> list[FailureEvent]:
    rng = np.random.default_rng([seed, 0xFA11])
    slots = np.arange(1, iterations, rf.min_gap)
    if rf.count > slots.size:
        raise ConfigError(f"failures.random.count: {rf.count} failures do not fit {iterations} iterations "
                          f"with min_gap {rf.min_gap}")
    ats = np.sort(rng.choice(slots, size=rf.count, replace=False))
    out = []
    for at in ats:
        kind = rf.kinds[int(rng.integers(len(rf.kinds)))]
        if kind == "node":
            out.append(FailureEvent(int(at), "node", node=int(rng.integers(len(topology.nodes)))))
        elif kind == "rack":
            out.append(FailureEvent(int(at), "rack", rack=int(rng.integers(len(topology.racks)))))
        else:
            out.append(FailureEvent(int(at), "software"))
    return out


# -- parsing ------------------------------------------------------------------

_MISSING = object()


class _Reader:
    def __init__(self, data: Any, path: str):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
        self.data = dict(data)
        self.path = path

    def _p(self, key):
        return f"{self.path}.{key}" if self.path else key

    def get(self, key, kind, default=_MISSING):
        if key not in self.data:
            if default is _MISSING:
                raise ConfigError(f"{self._p(key)}: required")
            return default
        value = self.data.pop(key)
        return _coerce(value, kind, self._p(key))

    def sub(self, key) -> "_Reader":
        return _Reader(self.data.pop(key, None), self._p(key))

    def done(self):
        if self.data:
            raise ConfigError(f"{self._p(sorted(self.data)[0])}: unknown field")


def _coerce(value, kind, path):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, str):
            # YAML 1.1 reads 2.0e+10 (no exponent sign) as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if kind == "opt_int":
        return None if value is None else _coerce(value, int, path)
    if kind == "opt_str":
        return None if value is None else _coerce(value, str, path)
    if kind is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    raise TypeError(kind)


def _wrap(path, fn, *args, **kwargs):
    """Re-anchor a component's own validation message under ``path``."""
    try:
        return fn(*args, **kwargs)
    except ConfigError as exc:
        msg = str(exc)
        head, _, rest = msg.partition(":")
        leaf = head.rsplit(".", 1)[-1]
        raise ConfigError(f"{path}.{leaf}:{rest}") from None


def scenario_from_dict(data: dict) -> Scenario:
    d = Scenario()
    root = _Reader(data, "")
    seed = root.get("seed", int, d.seed)
    phi = root.get("phi", int, d.phi)
    if phi < 1:
        raise ConfigError(f"phi: must be >= 1, got {phi}")
    iterations = root.get("iterations", int, d.iterations)
    if iterations < 1:
        raise ConfigError(f"iterations: must be >= 1, got {iterations}")
    lossless = root.get("lossless", bool, d.lossless)
    tier3_root = root.get("tier3_root", "opt_str", None)
    name = root.get("name", str, d.name)

    topo = root.sub("topology")
    racks = topo.get("racks", list, [list(r) for r in d.racks])
    world = topo.get("world", "opt_int", None)
    lk = topo.sub("links")
    link_kwargs = {f.name: lk.get(f.name, float, getattr(d.links, f.name)) for f in dataclasses.fields(Links)}
    lk.done()
    links = _wrap("topology.links", Links, **link_kwargs)
    compute_time = topo.get("compute_time", float, d.compute_time)
    if not compute_time > 0:
        raise ConfigError(f"topology.compute_time: must be > 0, got {compute_time}")
    topo.done()
    if not isinstance(racks, list) or not all(isinstance(r, list) for r in racks):
        raise ConfigError("topology.racks: expected a list of node rank-count lists")
    topology = _wrap("topology", Topology.build, racks, links)
    if world is not None and world != topology.world:
        raise ConfigError(f"topology.world: {world} does not match the {topology.world} ranks in topology.racks")
    if phi < topology.world:
        raise ConfigError(f"phi: {phi} parameters cannot be sharded over {topology.world} ranks")

    h = root.sub("hp")
    hp = _wrap("hp", AdamHyper, **{f.name: h.get(f.name, float, getattr(d.hp, f.name))
                                   for f in dataclasses.fields(AdamHyper)})
    h.done()

    c = root.sub("compression")
    comp_kwargs = dict(
        small_threshold=c.get("small_threshold", int, d.saver.compression.small_threshold),
        k=c.get("k", float, d.saver.compression.k),
        sample_size=c.get("sample_size", int, d.saver.compression.sample_size),
        chunk_limit=c.get("chunk_limit", int, d.saver.compression.chunk_limit),
    )
    c.done()
    comp = _wrap("compression", CompressionConfig, seed=seed, lossless=lossless, **comp_kwargs)

    ck = root.sub("checkpoint")
    checkpointing = ck.get("enabled", bool, d.checkpointing)
    policy = ck.get("reclaim_policy", str, d.reclaim_policy)
    if policy not in ("watermark", "naive"):
        raise ConfigError(f"checkpoint.reclaim_policy: must be watermark or naive, got {policy!r}")
    saver = _wrap("checkpoint", SaverConfig,
                  base_interval=ck.get("base_interval", int, d.saver.base_interval),
                  batch_len=ck.get("batch_len", int, d.saver.batch_len),
                  safety_margin=ck.get("safety_margin", "opt_int", d.saver.safety_margin),
                  chunk_cap=ck.get("chunk_cap", int, d.saver.chunk_cap),
                  compression=comp)
    ck.done()

    rc = root.sub("recovery")
    costs = ReplayCosts(
        compute_time=compute_time,
        fused_pass_time=rc.get("fused_pass_time", float, d.costs.fused_pass_time),
        native_step_time=rc.get("native_step_time", float, d.costs.native_step_time),
    )
    rc.done()
    if costs.fused_pass_time < 0 or costs.native_step_time < 0:
        raise ConfigError("recovery: pass and step times must be >= 0")

    fl = root.sub("failures")
    events = []
    for i, item in enumerate(fl.get("schedule", list, [])):
        events.append(_failure(item, f"failures.schedule[{i}]", iterations, topology))
    rr = fl.sub("random")
    count = rr.get("count", int, 0)
    kinds = tuple(rr.get("kinds", list, list(FAILURE_KINDS)))
    min_gap = rr.get("min_gap", int, 1)
    rr.done()
    fl.done()
    if count < 0:
        raise ConfigError(f"failures.random.count: must be >= 0, got {count}")
    if min_gap < 1:
        raise ConfigError(f"failures.random.min_gap: must be >= 1, got {min_gap}")
    for i, k in enumerate(kinds):
        if k not in FAILURE_KINDS:
            raise ConfigError(f"failures.random.kinds[{i}]: unknown failure kind {k!r}")

    rec = root.sub("record")
    record_footprint = rec.get("footprint", bool, d.record_footprint)
    digest_steps = rec.get("digests_at", list, [])
    rec.done()
    for i, s in enumerate(digest_steps):
        _coerce(s, int, f"record.digests_at[{i}]")
    root.done()
    if not checkpointing and (events or count):
        raise ConfigError("checkpoint.enabled: failures need checkpointing")

    return Scenario(
        seed=seed, phi=phi, iterations=iterations, lossless=lossless, checkpointing=checkpointing,
        reclaim_policy=policy, tier3_root=tier3_root, racks=tuple(tuple(r) for r in racks),
        links=links, compute_time=compute_time, hp=hp, saver=saver, costs=costs,
        failures=tuple(events), random_failures=RandomFailures(count, kinds, min_gap),
        record_footprint=record_footprint, digest_steps=tuple(digest_steps), name=name,
    )


def _failure(item, path, iterations, topology) -> FailureEvent:
    r = _Reader(item, path)
    at = r.get("at", int)
    if not 0 < at < iterations:
        raise ConfigError(f"{path}.at: must be in [1, {iterations}), got {at}")
    kind = r.get("kind", str)
    if kind == "software":
        ev = FailureEvent(at, "software")
    elif kind == "node":
        node = r.get("node", int)
        if not 0 <= node < len(topology.nodes):
            raise ConfigError(f"{path}.node: no such node {node}")
        ev = FailureEvent(at, "node", node=node, replace=r.get("replace", bool, True))
    elif kind == "rack":
        rack = r.get("rack", int)
        if not 0 <= rack < len(topology.racks):
            raise ConfigError(f"{path}.rack: no such rack {rack}")
        ev = FailureEvent(at, "rack", rack=rack)
    else:
        raise ConfigError(f"{path}.kind: must be software, node or rack, got {kind!r}")
    r.done()
    return ev


def load_scenario(path: str | os.PathLike) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise ConfigError(f"{p}: config file not found") from None
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read config ({exc.strerror})") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML ({exc})") from None
    scenario = scenario_from_dict(data or {})
    if scenario.name == "scenario":
        scenario = dataclasses.replace(scenario, name=p.stem)
    return scenario


DEFAULT_YAML = """\
# Desk-scale default: 2 racks x 2 nodes x 2 ranks.
seed: 0
phi: 1048576
iterations: 500
lossless: false
topology:
  racks: [[2, 2], [2, 2]]
  compute_time: 0.5
  links:
    local_bw: 2.0e+10
    intra_rack_bw: 5.0e+9
    tier3_bw: 5.0e+8
    tier3_latency: 0.05
    probe_tier1: 0.01
    probe_tier2: 0.05
    probe_tier3: 0.5
hp: {lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1.0e-8}
checkpoint:
  enabled: true
  base_interval: 50
  batch_len: 5
  safety_margin: null
  chunk_cap: 268435456
  reclaim_policy: watermark
compression: {small_threshold: 100000, k: 0.01, sample_size: 16384, chunk_limit: 1048576}
recovery: {fused_pass_time: 0.02, native_step_time: 0.05}
failures:
  schedule: []
  random: {count: 0, kinds: [software, node, rack], min_gap: 1}
record: {footprint: true, digests_at: []}
"""
