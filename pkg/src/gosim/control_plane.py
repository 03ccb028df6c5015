"""LSP establishment with GoS Plane construction.

Signaling runs hop by hop with real encoded messages: a GoS-extended Path
travels downstream and each GoS-capable node records a GoS Table row and
rewrites the GoSP PHOP field with its own address; a GoS-extended Resv then
travels upstream carrying the granted level and the label bindings are
committed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from . import codec
from .codec import GosPathObject, GosResvObject, PathMsg, ResvMsg
from .topology import RoutePath, Topology, TopologyError

MIN_LABEL = 16
MAX_LABEL = (1 << 20) - 1
DEFAULT_LEVEL_UNIT_BYTES = 1500


class SignalingError(ValueError):
    pass


@dataclass(frozen=True)
class FibEntry:
    in_label: int
    out_label: int | None   # None at the egress: label popped, packet delivered
    next_hop: str | None
    fec: int


@dataclass(frozen=True)
class GosTableEntry:
    fec: int
    level: int
    gosp_phop: int          # 0 (null address) at the GoSP head


@dataclass(frozen=True)
class LspDescriptor:
    fec: int
    route: RoutePath
    level: int
    gosp: tuple[str, ...]
    requested_level: int = 0

    @property
    def privileged(self) -> bool:
        return self.level > 0


class TeardownResult(NamedTuple):
    fib_rows: int
    gos_rows: int


@dataclass
class NodeState:
    node_id: str
    address: int
    gos_capable: bool
    buffer_bytes: int
    fib: dict[int, FibEntry] = field(default_factory=dict)
    gos_table: dict[int, GosTableEntry] = field(default_factory=dict)
    levels: dict[int, int] = field(default_factory=dict)   # fec -> level, shared with the GoS buffer
    next_label: int = MIN_LABEL

    def allocate_label(self) -> int:
        if self.next_label > MAX_LABEL:
            raise SignalingError(f"label space exhausted at {self.node_id}")
        label = self.next_label
        self.next_label += 1
        return label


class ControlPlane:
    """Per-node FIB and GoS Table state for one MPLS domain."""

    def __init__(self, topology: Topology, level_unit_bytes: int = DEFAULT_LEVEL_UNIT_BYTES,
                 transcript: list[tuple[str, str, bytes]] | None = None):
        self.topology = topology
        self.level_unit_bytes = level_unit_bytes
        self.nodes = {
            n.id: NodeState(n.id, n.address_int, n.gos_capable, n.gos_buffer_bytes)
            for n in topology.nodes
        }
        self.by_address = {st.address: st.node_id for st in self.nodes.values()}
        self.lsps: dict[int, LspDescriptor] = {}
        self.ingress_label: dict[int, int] = {}
        self.transcript = transcript
        self.teardown_hooks: list[Callable[[int, LspDescriptor], None]] = []

    # one hop of signaling: everything a node sees went through the wire format
    def _send(self, sender: str, receiver: str, msg):
        raw = codec.encode(msg)
        if self.transcript is not None:
            self.transcript.append((sender, receiver, raw))
        return codec.decode(raw)

    def _affordable(self, st: NodeState) -> int:
        if self.level_unit_bytes <= 0:
            return codec.MAX_LEVEL
        units = st.buffer_bytes // self.level_unit_bytes - sum(st.levels.values())
        return max(0, min(units, codec.MAX_LEVEL))

    def signal_lsp(self, route: RoutePath, fec: int, level: int) -> LspDescriptor:
        if fec in self.lsps:
            raise SignalingError(f"FEC {fec} is already signaled")
        if len(route.nodes) < 2:
            raise SignalingError("route needs at least two nodes")
        try:
            checked = self.topology.route(route.nodes)
        except TopologyError as exc:
            raise SignalingError(f"route invalid: {exc}") from None
        if checked != route:
            raise SignalingError("route delays disagree with the topology")
        if not 0 <= level <= codec.MAX_LEVEL:
            raise SignalingError(f"level {level} does not fit in 16 bits")

        states = [self.nodes[n] for n in route.nodes]
        # Path, downstream
        msg = PathMsg(fec, states[0].address, GosPathObject(level, codec.NULL_ADDRESS) if level else None)
        tentative: dict[str, int] = {}
        for k, st in enumerate(states):
            if k:
                msg = self._send(states[k - 1].node_id, st.node_id, msg)
            if msg.gos_path is not None and st.gos_capable:
                tentative[st.node_id] = msg.gos_path.gosp_phop
                msg = PathMsg(msg.session, st.address, GosPathObject(msg.gos_path.level, st.address))
            else:
                msg = PathMsg(msg.session, st.address, msg.gos_path)

        # Resv, upstream; labels bound downstream-first, granted level may only shrink
        if any(st.next_label > MAX_LABEL for st in states):
            raise SignalingError("label space exhausted")
        labels = {}
        granted = level
        resv = None
        for k in range(len(states) - 1, -1, -1):
            st = states[k]
            if resv is not None:
                resv = self._send(states[k + 1].node_id, st.node_id, resv)
                granted = resv.gos_resv.granted_level if resv.gos_resv else 0
            labels[st.node_id] = st.allocate_label()
            if st.node_id in tentative:
                granted = min(granted, self._affordable(st))
            resv = ResvMsg(fec, st.address, GosResvObject(granted) if level else None)

        gosp = tuple(n for n in route.nodes if n in tentative) if granted else ()
        for k, st in enumerate(states):
            nxt = route.nodes[k + 1] if k + 1 < len(route.nodes) else None
            st.fib[labels[st.node_id]] = FibEntry(labels[st.node_id], labels[nxt] if nxt else None, nxt, fec)
            if granted and st.node_id in tentative:
                st.gos_table[fec] = GosTableEntry(fec, granted, tentative[st.node_id])
                st.levels[fec] = granted
        lsp = LspDescriptor(fec, route, granted, gosp, level)
        self.lsps[fec] = lsp
        self.ingress_label[fec] = labels[route.nodes[0]]
        return lsp

    def gos_table_lookup(self, node_id: str, fec: int) -> GosTableEntry | None:
        if node_id not in self.nodes:
            raise TopologyError(f"unknown node {node_id!r}")
        return self.nodes[node_id].gos_table.get(fec)

    def phop_node(self, node_id: str, fec: int) -> str | None:
        """Node id of the previous GoS hop for ``fec``, or None at the GoSP head."""
        entry = self.nodes[node_id].gos_table.get(fec)
        if entry is None or entry.gosp_phop == codec.NULL_ADDRESS:
            return None
        return self.by_address[entry.gosp_phop]

    def teardown_lsp(self, fec: int) -> TeardownResult:
        lsp = self.lsps.pop(fec, None)
        if lsp is None:
            raise SignalingError(f"unknown FEC {fec}")
        self.ingress_label.pop(fec, None)
        fib_rows = gos_rows = 0
        for nid in lsp.route.nodes:
            st = self.nodes[nid]
            for label in [lb for lb, e in st.fib.items() if e.fec == fec]:
                del st.fib[label]
                fib_rows += 1
            if st.gos_table.pop(fec, None) is not None:
                gos_rows += 1
            st.levels.pop(fec, None)
        for hook in self.teardown_hooks:
            hook(fec, lsp)
        return TeardownResult(fib_rows, gos_rows)

    def trace_labels(self, fec: int) -> list[str]:
        """Follow FIB label swaps from the ingress; returns the visited nodes."""
        lsp = self.lsps[fec]
        node = lsp.route.nodes[0]
        label = self.ingress_label[fec]
        visited = [node]
        while True:
            entry = self.nodes[node].fib[label]
            if entry.next_hop is None:
                return visited
            node, label = entry.next_hop, entry.out_label
            visited.append(node)
            if len(visited) > len(self.nodes):
                raise SignalingError("label-swap loop")
