import os

from hypothesis import settings

from gosim.control_plane import ControlPlane
from gosim.forwarding import ForwardingEngine
from gosim.simulation import EventLoop
from gosim.topology import line_topology

settings.register_profile("ci", deadline=None, print_blob=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


class Burst:
    """Emit ``count`` packets, one every ``interval`` us."""

    def __init__(self, count, interval=10):
        self.count = count
        self.interval = interval

    def active(self, now, next_pid):
        return next_pid < self.count

    def next_interval(self):
        return self.interval


class ScriptedDrops:
    """Discard exactly the listed (node, packet id, copy generation) arrivals."""

    def __init__(self, plan=(), rate_one=()):
        self.plan = set(plan)
        self.rate_one = set(rate_one)
        self.fired = []

    def arrival_drop(self, node_index, node, pkt, now):
        key = (node, pkt.packet_id, pkt.gen)
        if key in self.plan or node in self.rate_one:
            self.fired.append((node, pkt.packet_id, pkt.gen, now))
            return True
        return False

    def enqueue(self, node, next_hop, size, now):
        return 0


class Harness:
    """One flow over a line X1..Xn driven by a private event loop."""

    def __init__(self, n=5, gos="all", delay=1, level=1, drops=None, count=20, interval=10,
                 window=None, buffer_bytes=10 ** 6, e2e_detect="timeout", gos_enabled=True,
                 rto_us=None, trace=False, fec=35):
        ids = [f"X{k}" for k in range(1, n + 1)]
        gos_nodes = ids if gos == "all" else list(gos)
        self.topology = line_topology(n, delay).with_gos(gos_nodes, buffer_bytes)
        self.cp = ControlPlane(self.topology)
        self.loop = EventLoop()
        self.lines = [] if trace else None
        self.drops = drops if drops is not None else ScriptedDrops()
        self.engine = ForwardingEngine(self.cp, self.loop.schedule, self.drops, gos_enabled=gos_enabled,
                                       e2e_detect=e2e_detect,
                                       trace=self.lines.append if trace else None)
        self.route = self.topology.route(ids)
        self.lsp = self.cp.signal_lsp(self.route, fec, level)
        self.flow = self.engine.add_flow(self.lsp, 1000, window or count + 1, Burst(count, interval), rto_us)
        self.fec = fec

    def start(self, at=0):
        self.engine.start_flow(self.fec, at)
        return self

    def run(self, until=10 ** 7):
        self.loop.run(until, self.engine.dispatch)
        return self

    @property
    def records(self):
        return self.engine.records
