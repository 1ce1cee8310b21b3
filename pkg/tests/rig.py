"""A saver wired to a store, clock and coordinator, for tests that drive the save path by hand."""
from tierckpt.diffcomp import CompressionConfig
from tierckpt.events import EventLog, EventLoop
from tierckpt.reclaimer import Reclaimer
from tierckpt.saver import Saver, SaverConfig
from tierckpt.state import AdamHyper, init_states, train_step
from tierckpt.tierstore import BaseKey, TierStore
from tierckpt.topology import Links, Topology


class Rig:
    """Saver wired to a store, clock and coordinator, driven like the simulator's loop."""

    def __init__(self, root, racks=((2, 2), (2, 2)), phi=4096, links=None, **cfg):
        self.topology = Topology.build([list(r) for r in racks], links or Links())
        cfg.setdefault("base_interval", 10)
        cfg.setdefault("batch_len", 5)
        self.cfg = SaverConfig(compression=CompressionConfig(), **cfg)
        self.loop = EventLoop()
        self.log = EventLog()
        self.store = TierStore(self.topology, root, self.cfg.base_interval, self.cfg.batch_len)
        self.reclaimer = Reclaimer(self.store, self.cfg.base_interval)
        self.saver = Saver(self.topology, self.store, self.loop, self.log, self.cfg,
                           on_tier3_marker=self.marker)
        self.states = init_states(phi, self.topology.world)
        self.t = 0
        self.stalls = []
        self.sent = []

    def marker(self, key, rank):
        if self.store.commit_tier3(key) == "committed" and isinstance(key, BaseKey):
            self.reclaimer.advance(self.loop.now)

    def run(self, iterations, pump=True):
        for _ in range(iterations):
            stall = 0.0
            if self.t % self.cfg.base_interval == 0:
                stall = self.saver.on_base(self.states, self.t)
            self.stalls.append(stall)
            self.states, grads = train_step(self.states, 0, AdamHyper())
            self.loop.advance(0.5)
            for g in grads:
                self.saver.on_iteration(g.rank, g)
            if pump:
                self.sent.append([self.saver.pump_replication(r) for r in range(self.topology.world)])
            self.t += 1
