"""MPLS data plane with GoS local recovery.

The engine is driven by an external event loop through a ``schedule(time,
kind, payload)`` callable. Data packets are label-switched hop by hop;
GoS-capable nodes buffer privileged packets, detect losses (their own
discards, or id gaps left by discards at upstream non-GoS nodes) and walk
the GoS Plane upstream with GoSReq/GoSAck Hello extensions until a buffer
hit triggers a local retransmission. Anything not recovered locally is
left to a simple head-end transport with a fixed retransmission timeout.
"""

from __future__ import annotations

import enum
from collections import OrderedDict, Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple

from . import codec
from .codec import GosAckObject, GosReqObject, HelloAck, HelloReq
from .control_plane import ControlPlane, FibEntry, LspDescriptor

# event kinds understood by ForwardingEngine.dispatch
EV_PACKET = 0
EV_CONTROL = 1
EV_ACK = 2
EV_TIMER = 3
EV_SEND = 4
EV_RTO = 5
EV_EERR = 6

COUNT_KEYS = ("drops", "misrouted", "duplicates", "gos_req", "gos_ack", "lrp", "recovered", "exhausted",
              "e2e_retx", "eerr", "congested_windows")

DEFAULT_REORDER_WINDOW = 3
DEFAULT_ACK_TIMEOUT_FACTOR = 4


# -- node state machine ----------------------------------------------------------

class GosState(enum.Enum):
    DATA_FORWARDING = "DataForwarding"
    LOCAL_RECOVERY_REQUEST = "LocalRecoveryRequest"
    BUFFER_ACCESS = "BufferAccess"
    LOCAL_RETRANSMISSION = "LocalRetransmission"


class GosEvent(enum.Enum):
    LOSS_DETECTED = "loss_detected"
    GOS_REQ_RECEIVED = "gos_req_received"
    GOS_ACK_RECEIVED = "gos_ack_received"
    PACKET_FOUND = "packet_found"
    PACKET_NOT_FOUND = "packet_not_found"
    RETRANSMITTED = "retransmitted"
    GOSP_EXHAUSTED = "gosp_exhausted"
    ACK_TIMEOUT = "ack_timeout"


_S = GosState
_E = GosEvent
TRANSITIONS: dict[tuple[GosState, GosEvent], GosState] = {
    (_S.DATA_FORWARDING, _E.LOSS_DETECTED): _S.LOCAL_RECOVERY_REQUEST,
    (_S.LOCAL_RECOVERY_REQUEST, _E.GOS_ACK_RECEIVED): _S.DATA_FORWARDING,
    # no request could be sent (GoSP head) or the ack never came back
    (_S.LOCAL_RECOVERY_REQUEST, _E.GOSP_EXHAUSTED): _S.DATA_FORWARDING,
    (_S.LOCAL_RECOVERY_REQUEST, _E.ACK_TIMEOUT): _S.DATA_FORWARDING,
    (_S.DATA_FORWARDING, _E.GOS_REQ_RECEIVED): _S.BUFFER_ACCESS,
    (_S.BUFFER_ACCESS, _E.PACKET_FOUND): _S.LOCAL_RETRANSMISSION,
    (_S.LOCAL_RETRANSMISSION, _E.RETRANSMITTED): _S.DATA_FORWARDING,
    (_S.BUFFER_ACCESS, _E.PACKET_NOT_FOUND): _S.LOCAL_RECOVERY_REQUEST,
}


class IllegalTransition(RuntimeError):
    pass


def next_state(state: GosState, event: GosEvent) -> GosState:
    try:
        return TRANSITIONS[(state, event)]
    except KeyError:
        raise IllegalTransition(f"{state.value} has no transition on {event.value}") from None


class GosContext:
    """State machine instance for one recovery transaction at one node."""

    __slots__ = ("state", "history", "token", "record")

    def __init__(self, record=None):
        self.state = GosState.DATA_FORWARDING
        self.history: list[tuple[GosState, GosState]] = []
        self.token = 0
        self.record = record

    def fire(self, event: GosEvent) -> GosState:
        new = next_state(self.state, event)
        self.history.append((self.state, new))
        self.state = new
        return new


# -- packets and buffers -------------------------------------------------------------

class CopyKind(enum.IntEnum):
    ORIGINAL = 0
    LOCAL = 1       # locally recovered packet (LRP)
    END_TO_END = 2  # head-end retransmission


@dataclass(slots=True, eq=False)
class DataPacket:
    label: int
    fec: int
    packet_id: int
    size_bytes: int
    created_at: int
    gen: int = 0
    kind: CopyKind = CopyKind.ORIGINAL


class ActionKind(enum.Enum):
    FORWARDED = "forwarded"
    DROPPED = "dropped"
    DELIVERED = "delivered"
    MISROUTED = "misrouted"


class Action(NamedTuple):
    kind: ActionKind
    next_hop: str | None = None


class GosBuffer:
    """Per-node store of privileged packets, split into per-FEC FIFO quotas.

    A FEC's quota is ``capacity * level / sum(levels)`` over the privileged
    FECs currently signaled through the node; ``levels`` is a live mapping.
    """

    def __init__(self, capacity_bytes: int, levels: Mapping[int, int]):
        self.capacity_bytes = capacity_bytes
        self.levels = levels
        self._store: dict[int, OrderedDict[int, tuple[int, int]]] = {}
        self._used: dict[int, int] = {}
        self.evictions = 0

    def quota(self, fec: int) -> int:
        total = sum(self.levels.values())
        if not total:
            return 0
        return self.capacity_bytes * self.levels.get(fec, 0) // total

    def used(self, fec: int | None = None) -> int:
        if fec is None:
            return sum(self._used.values())
        return self._used.get(fec, 0)

    def insert(self, pkt: DataPacket) -> bool:
        """Store a copy; evicts the FEC's oldest packets to make room."""
        q = self.quota(pkt.fec)
        if pkt.size_bytes > q:
            return False
        store = self._store.get(pkt.fec)
        if store is None:
            store = self._store[pkt.fec] = OrderedDict()
            self._used[pkt.fec] = 0
        if pkt.packet_id in store:
            return True
        while self._used[pkt.fec] + pkt.size_bytes > q:
            self.evict(pkt.fec)
        store[pkt.packet_id] = (pkt.size_bytes, pkt.created_at)
        self._used[pkt.fec] += pkt.size_bytes
        return True

    def lookup(self, fec: int, packet_id: int) -> tuple[int, int] | None:
        store = self._store.get(fec)
        return store.get(packet_id) if store else None

    def evict(self, fec: int) -> int | None:
        store = self._store.get(fec)
        if not store:
            return None
        pid, (size, _) = store.popitem(last=False)
        self._used[fec] -= size
        self.evictions += 1
        return pid

    def rebalance(self) -> None:
        for fec in list(self._store):
            q = self.quota(fec)
            while self._used[fec] > q:
                self.evict(fec)

    def drop_flow(self, fec: int) -> int:
        store = self._store.pop(fec, None)
        self._used.pop(fec, None)
        return len(store) if store else 0

    def packet_ids(self, fec: int) -> list[int]:
        return list(self._store.get(fec, ()))


def congestion_check(incoming: int, outgoing: int) -> bool:
    """True when a node's measurement window breaks flow conservation (in > out)."""
    return incoming > outgoing


class GapDetector:
    """Declares a packet id missing once ``window`` newer packets confirm the gap."""

    __slots__ = ("window", "next_id", "suspects")

    def __init__(self, window: int = DEFAULT_REORDER_WINDOW, next_id: int = 0):
        self.window = window
        self.next_id = next_id
        self.suspects: dict[int, int] = {}

    def observe(self, packet_id: int) -> list[int]:
        suspects = self.suspects
        if packet_id in suspects:
            del suspects[packet_id]        # late, not lost
        elif packet_id < self.next_id:
            return []                      # duplicate or recovered copy
        declared = []
        for m in list(suspects):
            suspects[m] += 1
            if suspects[m] >= self.window:
                del suspects[m]
                declared.append(m)
        if packet_id >= self.next_id:
            for m in range(self.next_id, packet_id):
                suspects[m] = 0
            self.next_id = packet_id + 1
        return declared


# -- transport ------------------------------------------------------------------------

class HeadEnd:
    """Sender side of the simplified reliable transport.

    Sliding window of ``window`` packets over the lowest unacknowledged id;
    the sink acknowledges cumulatively and echoes the id that triggered the
    ack. A packet is resent when it has been unacknowledged for longer than
    ``rto_us``.
    """

    def __init__(self, rto_us: int, window: int):
        self.rto_us = rto_us
        self.window = window
        self.next_pid = 0
        self.cum_ack = 0
        self.unacked: OrderedDict[int, int] = OrderedDict()   # pid -> last send time
        self.retransmissions = 0

    def window_open(self) -> bool:
        return self.next_pid - self.cum_ack < self.window

    def emit(self, now: int) -> int:
        pid = self.next_pid
        self.next_pid += 1
        self.unacked[pid] = now
        return pid

    def on_ack(self, cum: int, pid: int) -> None:
        self.unacked.pop(pid, None)
        while self.cum_ack < cum:
            self.unacked.pop(self.cum_ack, None)
            self.cum_ack += 1

    def step(self, now: int) -> list[int]:
        """Packets whose timeout expired at ``now``; their timers restart."""
        due = []
        for pid, sent in self.unacked.items():
            if now - sent > self.rto_us:
                due.append(pid)
            else:
                break
        for pid in due:
            self.unacked.move_to_end(pid)
            self.unacked[pid] = now
        self.retransmissions += len(due)
        return due

    def resend(self, pid: int, now: int) -> bool:
        if pid not in self.unacked:
            return False
        self.unacked.move_to_end(pid)
        self.unacked[pid] = now
        self.retransmissions += 1
        return True

    def next_deadline(self) -> int | None:
        for sent in self.unacked.values():
            return sent + self.rto_us + 1
        return None


class Sink:
    __slots__ = ("delivered", "cum")

    def __init__(self):
        self.delivered: set[int] = set()
        self.cum = 0

    def receive(self, pid: int) -> bool:
        if pid in self.delivered:
            return False
        self.delivered.add(pid)
        while self.cum in self.delivered:
            self.cum += 1
        return True


# -- recovery bookkeeping ----------------------------------------------------------------

class Outcome(enum.Enum):
    PENDING = "pending"
    RECOVERED = "recovered"
    EXHAUSTED = "exhausted"


@dataclass(eq=False)
class RecoveryRecord:
    fec: int
    packet_id: int
    node: str
    detected_at: int
    cause: str                       # "drop" at the node itself or "gap" seen downstream
    gosp_upstream: int               # GoS nodes above the requester on the GoSP
    outcome: Outcome = Outcome.PENDING
    diameter: int | None = None
    latency: int | None = None
    found_by: str | None = None
    requests: int = 0
    acks: list[bool] = field(default_factory=list)     # found flags, in escalation order
    acks_received: int = 0
    followers: list["RecoveryRecord"] = field(default_factory=list, repr=False)


@dataclass(eq=False)
class FlowRuntime:
    lsp: LspDescriptor
    head: HeadEnd
    sink: Sink
    size_bytes: int
    ingress: str
    egress: str
    positions: dict[str, int]
    one_way_us: int
    local_cover: list[bool]           # drop at route position k is visible to some GoS node
    source: object = None             # traffic source: active(now, next_pid), next_interval()
    outstanding: set[int] = field(default_factory=set)
    lost: set[int] = field(default_factory=set)
    recovering: Counter = field(default_factory=Counter)
    emitted: int = 0
    delivered_bytes: int = 0
    gen: dict[int, int] = field(default_factory=dict)
    timer_at: int | None = None
    blocked: bool = False
    send_pending: bool = False


class NodeRuntime:
    __slots__ = ("node_id", "index", "state", "buffer", "gaps", "gap_fecs",
                 "fec_fib", "contexts", "win_in", "win_out", "instance")

    def __init__(self, node_id, index, state, buffer):
        self.node_id = node_id
        self.index = index
        self.state = state                  # control_plane.NodeState
        self.buffer = buffer
        self.gaps: dict[int, GapDetector] = {}
        self.gap_fecs: set[int] = set()
        self.fec_fib: dict[int, FibEntry] = {}
        self.contexts: dict[tuple, GosContext] = {}
        self.win_in = 0
        self.win_out = 0
        self.instance = index + 1


class ForwardingEngine:
    def __init__(self, control: ControlPlane, schedule: Callable[[int, int, object], None],
                 drop_model=None, gos_enabled: bool = True,
                 reorder_window: int = DEFAULT_REORDER_WINDOW,
                 ack_timeout_factor: int = DEFAULT_ACK_TIMEOUT_FACTOR,
                 e2e_detect: str = "timeout",
                 trace: Callable[[str], None] | None = None):
        if e2e_detect not in ("timeout", "request"):
            raise ValueError(f"e2e_detect must be 'timeout' or 'request', got {e2e_detect!r}")
        self.cp = control
        self.schedule = schedule
        self.drop_model = drop_model
        self.gos_enabled = gos_enabled
        self.reorder_window = reorder_window
        self.ack_timeout_factor = ack_timeout_factor
        self.e2e_detect = e2e_detect
        self._trace = trace
        self.rt: dict[str, NodeRuntime] = {}
        for k, n in enumerate(control.topology.nodes):
            st = control.nodes[n.id]
            buf = GosBuffer(st.buffer_bytes, st.levels) if st.gos_capable else None
            self.rt[n.id] = NodeRuntime(n.id, k, st, buf)
        self.by_instance = {r.instance: r.node_id for r in self.rt.values()}
        self.flows: dict[int, FlowRuntime] = {}
        self.records: list[RecoveryRecord] = []
        self._awaiting: dict[tuple[str, int, int], list[RecoveryRecord]] = {}
        self._searching: dict[tuple[str, int, int], RecoveryRecord] = {}
        self.transitions: Counter = Counter()
        self.counts: Counter = Counter(dict.fromkeys(COUNT_KEYS, 0))
        control.teardown_hooks.append(self._on_teardown)

    # -- setup ----------------------------------------------------------------------

    def add_flow(self, lsp: LspDescriptor, size_bytes: int, window: int, source=None,
                 rto_us: int | None = None) -> FlowRuntime:
        route = lsp.route
        one_way = route.total_delay_us
        rto = rto_us if rto_us is not None else 2 * (2 * one_way)
        positions = {n: k for k, n in enumerate(route.nodes)}
        for nid in route.nodes:
            rt = self.rt[nid]
            rt.fec_fib[lsp.fec] = next(e for e in rt.state.fib.values() if e.fec == lsp.fec)
        gos = [self.gos_enabled and lsp.privileged and lsp.fec in self.rt[n].state.gos_table for n in route.nodes]
        # gap detection only where a non-GoS stretch separates a GoS node from its PHOP
        last_gos = None
        for k, nid in enumerate(route.nodes):
            if gos[k]:
                if last_gos is not None and k - last_gos > 1:
                    self.rt[nid].gap_fecs.add(lsp.fec)
                    self.rt[nid].gaps[lsp.fec] = GapDetector(self.reorder_window)
                last_gos = k
        cover = []
        for k in range(len(route.nodes)):
            if gos[k]:
                cover.append(self.cp.phop_node(route.nodes[k], lsp.fec) is not None)
            else:
                nxt = next((j for j in range(k + 1, len(route.nodes)) if gos[j]), None)
                cover.append(nxt is not None and lsp.fec in self.rt[route.nodes[nxt]].gap_fecs)
        for nid in lsp.gosp:
            if self.rt[nid].buffer is not None:
                self.rt[nid].buffer.rebalance()
        flow = FlowRuntime(lsp, HeadEnd(rto, window), Sink(), size_bytes, route.nodes[0], route.nodes[-1],
                           positions, one_way, cover, source)
        self.flows[lsp.fec] = flow
        return flow

    def _on_teardown(self, fec: int, lsp: LspDescriptor) -> None:
        for nid in lsp.route.nodes:
            rt = self.rt[nid]
            if rt.buffer is not None:
                rt.buffer.drop_flow(fec)
                rt.buffer.rebalance()
            rt.gaps.pop(fec, None)
            rt.gap_fecs.discard(fec)
            rt.fec_fib.pop(fec, None)
        self.flows.pop(fec, None)

    def trace(self, now, node, kind, fec, pid, detail=""):
        if self._trace is not None:
            self._trace(f"t={now} node={node} ev={kind} fec={fec} pid={pid} detail={detail}")

    def _fire(self, rt: NodeRuntime, key: tuple, ctx: GosContext, event: GosEvent, now: int) -> GosState:
        old = ctx.state
        new = ctx.fire(event)
        self.transitions[(old, new)] += 1
        if self._trace is not None:
            self.trace(now, rt.node_id, "state", key[0], key[1], f"{old.value}->{new.value}:{event.value}")
        if new is GosState.DATA_FORWARDING:
            rt.contexts.pop(key, None)
        return new

    # -- event dispatch ---------------------------------------------------------------

    def dispatch(self, now: int, kind: int, payload) -> None:
        if kind == EV_PACKET:
            self.forward_packet(payload[0], payload[1], now)
        elif kind == EV_CONTROL:
            self._on_control(payload[0], payload[1], payload[2], now)
        elif kind == EV_ACK:
            self._on_ack(payload[0], payload[1], payload[2], now)
        elif kind == EV_SEND:
            self._on_send(payload, now)
        elif kind == EV_RTO:
            self._on_rto(payload, now)
        elif kind == EV_TIMER:
            self._on_ack_timeout(payload, now)
        elif kind == EV_EERR:
            self._on_eerr(payload[0], payload[1], now)
        else:
            raise ValueError(f"unknown event kind {kind}")

    # -- data plane -------------------------------------------------------------------

    def forward_packet(self, node: str, pkt: DataPacket, now: int) -> Action:
        rt = self.rt[node]
        entry = rt.state.fib.get(pkt.label)
        if entry is None or entry.fec != pkt.fec:
            self.counts["misrouted"] += 1
            self.trace(now, node, "misrouted", pkt.fec, pkt.packet_id, f"label={pkt.label}")
            return Action(ActionKind.MISROUTED)
        fec = pkt.fec
        pid = pkt.packet_id
        flow = self.flows[fec]
        rt.win_in += 1
        if fec in rt.gap_fecs:
            for missing in rt.gaps[fec].observe(pid):
                self.detect_loss(node, fec, missing, now, cause="gap")
        awaiting = self._awaiting.get((node, fec, pid))
        if awaiting:
            for rec in awaiting:
                if rec.latency is None and rec.outcome is Outcome.RECOVERED and pkt.kind is CopyKind.LOCAL:
                    rec.latency = now - rec.detected_at
            del self._awaiting[(node, fec, pid)]

        nxt = entry.next_hop
        dm = self.drop_model
        wait = 0
        if dm is not None and node != flow.ingress:
            if dm.arrival_drop(rt.index, node, pkt, now):
                self.on_packet_drop(node, pkt, now)
                return Action(ActionKind.DROPPED)
        if nxt is not None and dm is not None:
            wait = dm.enqueue(node, nxt, pkt.size_bytes, now)
            if wait is None:
                self.on_packet_drop(node, pkt, now)
                return Action(ActionKind.DROPPED)

        if nxt is None:
            rt.win_out += 1
            self._deliver(flow, pkt, now)
            return Action(ActionKind.DELIVERED)
        if rt.buffer is not None and self.gos_enabled and fec in rt.state.gos_table:
            rt.buffer.insert(pkt)
        rt.win_out += 1
        pkt.label = entry.out_label
        self.schedule(now + wait + self.cp.topology.link(node, nxt).delay_us, EV_PACKET, (nxt, pkt))
        return Action(ActionKind.FORWARDED, nxt)

    def _deliver(self, flow: FlowRuntime, pkt: DataPacket, now: int) -> None:
        sink = flow.sink
        pid = pkt.packet_id
        if sink.receive(pid):
            flow.delivered_bytes += pkt.size_bytes
            flow.outstanding.discard(pid)
            flow.lost.discard(pid)
            self.trace(now, flow.egress, "deliver", pkt.fec, pid, pkt.kind.name.lower())
        else:
            self.counts["duplicates"] += 1
        self.schedule(now + flow.one_way_us, EV_ACK, (pkt.fec, sink.cum, pid))

    def _send_copy(self, flow: FlowRuntime, node: str, pid: int, kind: CopyKind, now: int) -> bool:
        """Emit a fresh copy of ``pid`` from ``node`` toward its next hop."""
        entry = self.rt[node].fec_fib[flow.lsp.fec]
        gen = flow.gen.get(pid, 0) + 1
        flow.gen[pid] = gen
        pkt = DataPacket(entry.out_label, flow.lsp.fec, pid, flow.size_bytes, now, gen, kind)
        flow.lost.discard(pid)
        wait = 0
        if self.drop_model is not None:
            wait = self.drop_model.enqueue(node, entry.next_hop, pkt.size_bytes, now)
            if wait is None:
                flow.lost.add(pid)
                self.counts["drops"] += 1
                return False
        self.schedule(now + wait + self.cp.topology.link(node, entry.next_hop).delay_us, EV_PACKET,
                      (entry.next_hop, pkt))
        return True

    def on_packet_drop(self, node: str, pkt: DataPacket, now: int) -> RecoveryRecord | None:
        """Account a discard at ``node``; a GoS node of a privileged LSP starts local recovery."""
        flow = self.flows[pkt.fec]
        flow.lost.add(pkt.packet_id)
        self.counts["drops"] += 1
        self.trace(now, node, "drop", pkt.fec, pkt.packet_id, pkt.kind.name.lower())
        if self.gos_enabled and pkt.fec in self.rt[node].state.gos_table:
            rec = self.detect_loss(node, pkt.fec, pkt.packet_id, now, cause="drop")
            if rec is not None:
                return rec
        if self.e2e_detect == "request" and not flow.local_cover[flow.positions[node]]:
            self._send_eerr(flow, node, pkt.packet_id, now)
        return None

    def detect_loss(self, node: str, fec: int, pid: int, now: int, cause: str) -> RecoveryRecord | None:
        rt = self.rt[node]
        phop = self.cp.phop_node(node, fec)
        if phop is None:
            return None
        key = (fec, pid, "own")
        if key in rt.contexts:
            return None
        flow = self.flows[fec]
        rec = RecoveryRecord(fec, pid, node, now, cause, flow.lsp.gosp.index(node))
        self.records.append(rec)
        ctx = rt.contexts[key] = GosContext(rec)
        self._fire(rt, key, ctx, GosEvent.LOSS_DETECTED, now)
        self._awaiting.setdefault((node, fec, pid), []).append(rec)
        self._searching[(node, fec, pid)] = rec
        flow.recovering[pid] += 1
        self._send_gos_req(node, phop, rec, key, now)
        return rec

    def _hop_delay(self, flow: FlowRuntime, a: str, b: str) -> int:
        pa, pb = flow.positions[a], flow.positions[b]
        lo, hi = min(pa, pb), max(pa, pb)
        return flow.lsp.route.delay_between(lo, hi)

    def _send_control(self, flow, src: str, dst: str, msg, meta, now: int) -> int:
        raw = codec.encode(msg)
        delay = self._hop_delay(flow, src, dst)
        self.schedule(now + delay, EV_CONTROL, (dst, raw, meta))
        self.trace(now, src, "tx_" + type(msg).__name__, flow.lsp.fec, -1, f"to={dst} hex={raw.hex()}")
        return delay

    def _send_gos_req(self, node: str, phop: str, rec: RecoveryRecord, ctx_key: tuple, now: int) -> None:
        flow = self.flows[rec.fec]
        rt = self.rt[node]
        msg = HelloReq(rt.instance, self.rt[phop].instance, GosReqObject(rec.fec, rec.packet_id))
        rec.requests += 1
        self.counts["gos_req"] += 1
        delay = self._send_control(flow, node, phop, msg, (rec, ctx_key), now)
        ctx = rt.contexts[ctx_key]
        ctx.token += 1
        self.schedule(now + self.ack_timeout_factor * 2 * delay, EV_TIMER, (node, ctx_key, ctx.token))

    def _on_control(self, node: str, raw: bytes, meta, now: int) -> None:
        msg = codec.decode(raw)
        rec, ctx_key = meta
        if isinstance(msg, HelloReq) and msg.gos_req is not None:
            self.handle_gos_req(node, msg, rec, ctx_key, now)
        elif isinstance(msg, HelloAck) and msg.gos_ack is not None:
            self._on_gos_ack(node, msg, rec, ctx_key, now)

    def handle_gos_req(self, node: str, msg: HelloReq, rec: RecoveryRecord, requester_key: tuple, now: int) -> bool:
        """Serve a GoSReq: answer with a GoSAck and retransmit locally or escalate upstream."""
        rt = self.rt[node]
        req = msg.gos_req
        fec, pid = req.flow_id, req.packet_id
        requester = self.by_instance[msg.src_instance]
        self.counts["serve_serial"] += 1
        key = (fec, pid, "serve", requester, self.counts["serve_serial"])
        ctx = rt.contexts[key] = GosContext(rec)
        self._fire(rt, key, ctx, GosEvent.GOS_REQ_RECEIVED, now)
        flow = self.flows.get(fec)
        row = rt.state.gos_table.get(fec) if flow is not None else None
        hit = None
        pending_own = None
        if row is not None and rt.buffer is not None:
            hit = rt.buffer.lookup(fec, pid)
            if hit is None:
                pending_own = self._own_recovery(node, fec, pid)
        found = hit is not None or pending_own is not None
        ack = HelloAck(rt.instance, msg.src_instance, GosAckObject(fec, pid, found))
        self.counts["gos_ack"] += 1
        rec.acks.append(found)
        if found:
            self._fire(rt, key, ctx, GosEvent.PACKET_FOUND, now)
            self._send_control(flow, node, requester, ack, (rec, requester_key), now)
            if hit is not None:
                self._finish_search(rec, Outcome.RECOVERED, node, now)
                self._send_copy(flow, node, pid, CopyKind.LOCAL, now)
                self.counts["lrp"] += 1
                self.trace(now, node, "lrp", fec, pid, f"d={rec.requests}")
            else:
                # already recovering this packet itself: its LRP will pass the requester
                pending_own.followers.append(rec)
                self._finish_search(rec, Outcome.RECOVERED, node, now)
            self._fire(rt, key, ctx, GosEvent.RETRANSMITTED, now)
            return True
        self._fire(rt, key, ctx, GosEvent.PACKET_NOT_FOUND, now)
        if flow is not None:
            self._send_control(flow, node, requester, ack, (rec, requester_key), now)
        phop = self.cp.phop_node(node, fec) if row is not None else None
        if phop is not None:
            self._send_gos_req(node, phop, rec, key, now)
        else:
            self._fire(rt, key, ctx, GosEvent.GOSP_EXHAUSTED, now)
            self._finish_search(rec, Outcome.EXHAUSTED, node, now)
        return False

    def _own_recovery(self, node: str, fec: int, pid: int) -> RecoveryRecord | None:
        """This node's own unfinished recovery of ``pid``, if one is under way."""
        rec = self._searching.get((node, fec, pid))
        if rec is not None:
            return rec
        for rec in self._awaiting.get((node, fec, pid), ()):
            if rec.outcome is Outcome.RECOVERED and rec.latency is None:
                return rec
        return None

    def _finish_search(self, rec: RecoveryRecord, outcome: Outcome, at: str, now: int) -> None:
        if rec.outcome is not Outcome.PENDING:
            return
        rec.outcome = outcome
        rec.found_by = at if outcome is Outcome.RECOVERED else None
        rec.diameter = rec.requests if outcome is Outcome.RECOVERED else None
        flow = self.flows.get(rec.fec)
        self._searching.pop((rec.node, rec.fec, rec.packet_id), None)
        if flow is not None:
            flow.recovering[rec.packet_id] -= 1
            if flow.recovering[rec.packet_id] <= 0:
                del flow.recovering[rec.packet_id]
        if outcome is Outcome.EXHAUSTED:
            self._awaiting.pop((rec.node, rec.fec, rec.packet_id), None)
            self.counts["exhausted"] += 1
            for f in rec.followers:
                f.outcome = Outcome.EXHAUSTED
                f.diameter = None
            if flow is not None and self.e2e_detect == "request":
                self._send_eerr(flow, rec.node, rec.packet_id, now)
        else:
            self.counts["recovered"] += 1

    def _on_gos_ack(self, node: str, msg: HelloAck, rec: RecoveryRecord, ctx_key: tuple, now: int) -> None:
        rt = self.rt[node]
        rec.acks_received += 1
        ctx = rt.contexts.get(ctx_key)
        if ctx is not None and ctx.state is GosState.LOCAL_RECOVERY_REQUEST:
            self._fire(rt, ctx_key, ctx, GosEvent.GOS_ACK_RECEIVED, now)

    def _on_ack_timeout(self, payload, now: int) -> None:
        node, ctx_key, token = payload
        rt = self.rt[node]
        ctx = rt.contexts.get(ctx_key)
        if ctx is None or ctx.token != token or ctx.state is not GosState.LOCAL_RECOVERY_REQUEST:
            return
        self._fire(rt, ctx_key, ctx, GosEvent.ACK_TIMEOUT, now)
        if ctx.record is not None:
            self._finish_search(ctx.record, Outcome.EXHAUSTED, node, now)

    # -- end-to-end transport --------------------------------------------------------------

    def start_flow(self, fec: int, at: int) -> None:
        flow = self.flows[fec]
        flow.send_pending = True
        self.schedule(at, EV_SEND, fec)

    def _on_send(self, fec: int, now: int) -> None:
        flow = self.flows.get(fec)
        if flow is None:
            return
        flow.send_pending = False
        src = flow.source
        if not src.active(now, flow.head.next_pid):
            return
        if not flow.head.window_open():
            flow.blocked = True
            return
        self._emit_original(flow, now)
        flow.send_pending = True
        self.schedule(now + src.next_interval(), EV_SEND, fec)

    def _emit_original(self, flow: FlowRuntime, now: int) -> None:
        pid = flow.head.emit(now)
        flow.emitted += 1
        flow.outstanding.add(pid)
        fec = flow.lsp.fec
        pkt = DataPacket(self.cp.ingress_label[fec], fec, pid, flow.size_bytes, now)
        self.trace(now, flow.ingress, "emit", fec, pid)
        self.forward_packet(flow.ingress, pkt, now)
        self._arm_rto(flow)

    def _arm_rto(self, flow: FlowRuntime) -> None:
        if flow.timer_at is None:
            deadline = flow.head.next_deadline()
            if deadline is not None:
                flow.timer_at = deadline
                self.schedule(deadline, EV_RTO, flow.lsp.fec)

    def e2e_transport_step(self, fec: int, now: int) -> list[int]:
        """Run the head-end timeout check for ``fec`` and resend what expired."""
        flow = self.flows[fec]
        due = flow.head.step(now)
        for pid in due:
            self.counts["e2e_retx"] += 1
            self.trace(now, flow.ingress, "e2e_retx", fec, pid)
            self._resend_from_head(flow, pid, now)
        return due

    def _resend_from_head(self, flow: FlowRuntime, pid: int, now: int) -> None:
        gen = flow.gen.get(pid, 0) + 1
        flow.gen[pid] = gen
        fec = flow.lsp.fec
        flow.lost.discard(pid)
        pkt = DataPacket(self.cp.ingress_label[fec], fec, pid, flow.size_bytes, now, gen, CopyKind.END_TO_END)
        self.forward_packet(flow.ingress, pkt, now)

    def _on_rto(self, fec: int, now: int) -> None:
        flow = self.flows.get(fec)
        if flow is None:
            return
        flow.timer_at = None
        self.e2e_transport_step(fec, now)
        self._arm_rto(flow)

    def _send_eerr(self, flow: FlowRuntime, node: str, pid: int, now: int) -> None:
        delay = flow.lsp.route.delay_between(0, flow.positions[node])
        self.counts["eerr"] += 1
        self.schedule(now + delay, EV_EERR, (flow.lsp.fec, pid))

    def _on_eerr(self, fec: int, pid: int, now: int) -> None:
        flow = self.flows.get(fec)
        if flow is None or pid in flow.sink.delivered:
            return
        if flow.head.resend(pid, now):
            self.counts["e2e_retx"] += 1
            self.trace(now, flow.ingress, "e2e_retx", fec, pid, "request")
            self._resend_from_head(flow, pid, now)

    def _on_ack(self, fec: int, cum: int, pid: int, now: int) -> None:
        flow = self.flows.get(fec)
        if flow is None:
            return
        flow.head.on_ack(cum, pid)
        if flow.blocked and flow.head.window_open():
            flow.blocked = False
            if not flow.send_pending:
                self._on_send(fec, now)

    # -- inspection -------------------------------------------------------------------------

    def node_state(self, node: str) -> GosState:
        """Most advanced state among the node's open recovery transactions."""
        ctxs = self.rt[node].contexts.values()
        for s in (GosState.LOCAL_RETRANSMISSION, GosState.BUFFER_ACCESS, GosState.LOCAL_RECOVERY_REQUEST):
            if any(c.state is s for c in ctxs):
                return s
        return GosState.DATA_FORWARDING
