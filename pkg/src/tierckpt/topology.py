"""Racks, nodes, ranks, link model, and the intra-rack ring used for Tier-2 peers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Links:
    """Bandwidths in bytes per simulated second, latencies in simulated seconds."""

    local_bw: float = 20e9
    intra_rack_bw: float = 5e9
    tier3_bw: float = 0.5e9
    tier3_latency: float = 0.05
    probe_tier1: float = 0.01
    probe_tier2: float = 0.05
    probe_tier3: float = 0.5

    def __post_init__(self):
        for name in ("local_bw", "intra_rack_bw", "tier3_bw"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"topology.links.{name}: must be > 0")
        for name in ("tier3_latency", "probe_tier1", "probe_tier2", "probe_tier3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"topology.links.{name}: must be >= 0")

    def probe(self, tier: int) -> float:
        return (self.probe_tier1, self.probe_tier2, self.probe_tier3)[tier - 1]


@dataclass(frozen=True)
class Node:
    node_id: int
    rack_id: int
    ranks: tuple[int, ...]


@dataclass(frozen=True)
class Topology:
    nodes: tuple[Node, ...]
    racks: tuple[tuple[int, ...], ...]  # node ids per rack
    links: Links = field(default_factory=Links)

    @classmethod
    def build(cls, racks: list[list[int]], links: Links | None = None) -> "Topology":
        """``racks[i][j]`` is the number of ranks on node j of rack i."""
        if not racks:
            raise ConfigError("topology.racks: need at least one rack")
        nodes = []
        rack_nodes = []
        next_rank = 0
        for ri, rack in enumerate(racks):
            if not rack:
                raise ConfigError(f"topology.racks[{ri}]: rack has no nodes")
            ids = []
            for ni, count in enumerate(rack):
                if not isinstance(count, int) or count < 1:
                    raise ConfigError(f"topology.racks[{ri}][{ni}]: rank count must be a positive integer")
                node_id = len(nodes)
                nodes.append(Node(node_id, ri, tuple(range(next_rank, next_rank + count))))
                next_rank += count
                ids.append(node_id)
            if len(set(rack)) > 1 and len(rack) > 1:
                raise ConfigError(f"topology.racks[{ri}]: ring peers need equal rank counts per node, got {rack}")
            if len(rack) == 1:
                log.warning("rack %d has a single node: Tier-2 peer replication disabled for its ranks", ri)
            rack_nodes.append(tuple(ids))
        return cls(nodes=tuple(nodes), racks=tuple(rack_nodes), links=links or Links())

    @property
    def world(self) -> int:
        return sum(len(n.ranks) for n in self.nodes)

    @cached_property
    def _rank_node(self) -> dict[int, int]:
        return {r: n.node_id for n in self.nodes for r in n.ranks}

    def node_of(self, rank: int) -> int:
        return self._rank_node[rank]

    def rack_of_node(self, node_id: int) -> int:
        return self.nodes[node_id].rack_id

    def peer_node(self, node_id: int) -> int | None:
        """Next node in the rack's ring, or None for a single-node rack."""
        rack = self.racks[self.nodes[node_id].rack_id]
        if len(rack) < 2:
            return None
        return rack[(rack.index(node_id) + 1) % len(rack)]

    def peer_of(self, rank: int) -> tuple[int, int] | None:
        """(peer node, peer rank) hosting this rank's Tier-2 replica."""
        node = self.nodes[self.node_of(rank)]
        peer = self.peer_node(node.node_id)
        if peer is None:
            return None
        local = node.ranks.index(rank)
        return peer, self.nodes[peer].ranks[local]

    def replicates_to(self, node_id: int) -> int | None:
        """Node whose ranks replicate into ``node_id`` (ring predecessor)."""
        rack = self.racks[self.nodes[node_id].rack_id]
        if len(rack) < 2:
            return None
        return rack[(rack.index(node_id) - 1) % len(rack)]

    def nodes_in_rack(self, rack_id: int) -> tuple[int, ...]:
        return self.racks[rack_id]
