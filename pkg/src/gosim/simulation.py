"""Discrete-event runs of GoS-over-MPLS scenarios and their metrics."""

from __future__ import annotations

import heapq
import math
import random
import shlex
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, NamedTuple

import numpy as np

from .control_plane import ControlPlane, DEFAULT_LEVEL_UNIT_BYTES
from .forwarding import (
    DEFAULT_ACK_TIMEOUT_FACTOR, DEFAULT_REORDER_WINDOW, EV_PACKET, ForwardingEngine, Outcome,
)
from .topology import (
    NodeKind, RoutePath, Topology, TopologyError, generate_att_like, line_topology,
    parse_topology, place_gos_nodes, shortest_delay_path,
)

US = 1_000_000
RATE_RANGE_BPS = (64_000, 4_000_000)
DEFAULT_BUFFER_BYTES = 4_000_000
EV_SAMPLE = 100

_MASK = (1 << 64) - 1


class ScenarioError(ValueError):
    """Validation failures; ``errors`` holds one located message per problem."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


class SimEvent(NamedTuple):
    time: int
    seq: int
    kind: int
    payload: object


class EventLoop:
    """Timestamp-ordered queue; equal times run in scheduling order."""

    def __init__(self):
        self._queue: list[tuple] = []
        self._seq = 0
        self.now = 0
        self.processed = 0

    def schedule(self, time: int, kind: int, payload=None) -> None:
        if time < self.now:
            raise ValueError(f"event at t={time} scheduled in the past (now={self.now})")
        heapq.heappush(self._queue, (time, self._seq, kind, payload))
        self._seq += 1

    def run(self, until: int, dispatch: Callable[[int, int, object], None]) -> None:
        q = self._queue
        pop = heapq.heappop
        while q and q[0][0] <= until:
            t, _seq, kind, payload = pop(q)
            if t < self.now:
                raise RuntimeError("event time went backwards")
            self.now = t
            self.processed += 1
            dispatch(t, kind, payload)
        self.now = max(self.now, until)

    def pending(self) -> list[SimEvent]:
        return [SimEvent(*e) for e in self._queue]


# -- drop models -----------------------------------------------------------------------

def _mix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


class BernoulliDrops:
    """Independent per-node discard probability.

    The coin for a packet copy is a hash of (seed, node, fec, packet id, copy
    generation), so runs with the same seed discard the same first-pass
    packets whether or not GoS is enabled.
    """

    def __init__(self, rates: dict[int, float], seed: int):
        self.thresholds = {idx: int(r * 2.0 ** 64) for idx, r in rates.items() if r > 0}
        self.rates = dict(rates)
        self.salt = _mix64(seed)

    def arrival_drop(self, node_index: int, node: str, pkt, now: int) -> bool:
        thr = self.thresholds.get(node_index)
        if thr is None:
            return False
        h = _mix64(self.salt ^ (node_index << 40) ^ pkt.fec)
        h = _mix64(h ^ (pkt.packet_id << 8) ^ pkt.gen)
        return h < thr

    def enqueue(self, node: str, next_hop: str, size_bytes: int, now: int) -> int:
        return 0


class QueueDrops:
    """Finite FIFO per outgoing link with tail drop; returns queueing wait in us."""

    def __init__(self, topology: Topology, cap_packets: int):
        self.topology = topology
        self.cap = cap_packets
        self._busy: dict[tuple[str, str], int] = {}
        self._departures: dict[tuple[str, str], list[int]] = {}

    def arrival_drop(self, node_index, node, pkt, now) -> bool:
        return False

    def enqueue(self, node: str, next_hop: str, size_bytes: int, now: int) -> int | None:
        key = (node, next_hop)
        deps = self._departures.setdefault(key, [])
        while deps and deps[0] <= now:
            heapq.heappop(deps)
        if len(deps) >= self.cap:
            return None
        tx = max(1, math.ceil(size_bytes * 8 * US / self.topology.link(node, next_hop).capacity_bps))
        start = max(now, self._busy.get(key, 0))
        self._busy[key] = start + tx
        heapq.heappush(deps, start + tx)
        return start - now


# -- scenario description ----------------------------------------------------------------

@dataclass(frozen=True)
class FlowSpec:
    fec: int
    src: str
    dst: str
    rate_bps: float
    packet_size_bytes: int = 1000
    level: int = 1
    start_s: float = 0.0
    stop_s: float | None = None
    window: int | None = None
    packets: int | None = None

    def interval_us(self) -> int:
        return max(1, round(self.packet_size_bytes * 8 * US / self.rate_bps))


@dataclass(frozen=True)
class DropSpec:
    kind: str = "none"                      # none | bernoulli | queue
    rate: tuple[float, float] = (0.0, 0.0)  # a per-node rate is drawn uniformly per seed
    nodes: tuple[str, ...] | str = "all"    # explicit ids, or all | lsr | gos
    cap: int = 0


@dataclass(frozen=True)
class ScenarioSpec:
    topology: Topology
    flows: tuple[FlowSpec, ...]
    gos_nodes: tuple[str, ...] = ()
    gos_buffer_bytes: int = DEFAULT_BUFFER_BYTES
    drop: DropSpec = DropSpec()
    duration_s: float = 60.0
    sample_interval_s: float = 1.0
    gos_enabled: bool = True
    arrival: str = "fixed"
    reorder_window: int = DEFAULT_REORDER_WINDOW
    ack_timeout_factor: int = DEFAULT_ACK_TIMEOUT_FACTOR
    e2e_detect: str = "timeout"
    level_unit_bytes: int = DEFAULT_LEVEL_UNIT_BYTES
    forced_drops: tuple[tuple[str, int, int], ...] = ()   # (node, fec, packet id) first-pass discards

    def validate(self) -> None:
        errors = []
        t = self.topology
        for k, nid in enumerate(self.gos_nodes):
            if nid not in t:
                errors.append(f"gos_nodes[{k}]: unknown node {nid!r}")
        fecs = set()
        for k, f in enumerate(self.flows):
            where = f"flows[{k}]"
            if f.fec in fecs:
                errors.append(f"{where}.fec: duplicate FEC {f.fec}")
            fecs.add(f.fec)
            if not 0 <= f.fec <= 0xFFFFFFFF:
                errors.append(f"{where}.fec: {f.fec} does not fit in 32 bits")
            for end in ("src", "dst"):
                nid = getattr(f, end)
                if nid not in t:
                    errors.append(f"{where}.{end}: unknown node {nid!r}")
                elif t.node(nid).kind is not NodeKind.LER:
                    errors.append(f"{where}.{end}: {nid!r} is not an LER")
            if f.src == f.dst:
                errors.append(f"{where}: src and dst are both {f.src!r}")
            if not RATE_RANGE_BPS[0] <= f.rate_bps <= RATE_RANGE_BPS[1]:
                errors.append(f"{where}.rate_bps: {f.rate_bps:g} outside [{RATE_RANGE_BPS[0]}, {RATE_RANGE_BPS[1]}]")
            if f.packet_size_bytes <= 0:
                errors.append(f"{where}.size: must be positive")
            if not 0 <= f.level <= 0xFFFF:
                errors.append(f"{where}.level: {f.level} does not fit in 16 bits")
            if f.start_s < 0 or (f.stop_s is not None and f.stop_s <= f.start_s):
                errors.append(f"{where}: need 0 <= start_s < stop_s")
            if f.window is not None and f.window < 1:
                errors.append(f"{where}.window: must be at least 1")
        if self.duration_s <= 0:
            errors.append("duration_s: must be positive")
        if self.sample_interval_s <= 0:
            errors.append("sample_interval_s: must be positive")
        d = self.drop
        if d.kind not in ("none", "bernoulli", "queue"):
            errors.append(f"drop: unknown model {d.kind!r}")
        if d.kind == "bernoulli" and not 0 <= d.rate[0] <= d.rate[1] <= 1:
            errors.append(f"drop.rate: {d.rate} is not a range within [0, 1]")
        if d.kind == "queue" and d.cap < 1:
            errors.append("drop.cap: must be at least 1")
        if not isinstance(d.nodes, str):
            for k, nid in enumerate(d.nodes):
                if nid not in t:
                    errors.append(f"drop.nodes[{k}]: unknown node {nid!r}")
        elif d.nodes not in ("all", "lsr", "gos"):
            errors.append(f"drop.nodes: unknown selector {d.nodes!r}")
        for k, (nid, _, pid) in enumerate(self.forced_drops):
            if nid not in t:
                errors.append(f"forced_drops[{k}]: unknown node {nid!r}")
            if pid < 0:
                errors.append(f"forced_drops[{k}]: packet id must be non-negative")
        if self.arrival not in ("fixed", "poisson"):
            errors.append(f"arrival: must be fixed or poisson, got {self.arrival!r}")
        if self.e2e_detect not in ("timeout", "request"):
            errors.append(f"e2e_detect: must be timeout or request, got {self.e2e_detect!r}")
        if self.gos_nodes and self.gos_buffer_bytes <= 0:
            errors.append("gos_buffer_bytes: must be positive")
        if errors:
            raise ScenarioError(errors)
        for k, f in enumerate(self.flows):
            try:
                shortest_delay_path(t, f.src, f.dst)
            except TopologyError as exc:
                errors.append(f"flows[{k}]: {exc}")
        if errors:
            raise ScenarioError(errors)


def spacing_positions(route_len: int, k: int) -> list[int]:
    if not 1 <= k < route_len:
        raise ValueError(f"spacing {k} needs a route longer than {k} nodes (got {route_len})")
    return list(range(0, route_len, k))


def diameter_spacing_scenario(t: Topology, route: RoutePath, k: int, **kwargs) -> ScenarioSpec:
    """One flow over ``route`` with GoS nodes at every k-th route position.

    Every recovery then reaches its GoSP PHOP k physical hops upstream.
    Extra keyword arguments go to FlowSpec (rate_bps, packet_size_bytes,
    level, window) or ScenarioSpec (duration_s, drop, ...).
    """
    gos = tuple(route.nodes[p] for p in spacing_positions(len(route.nodes), k))
    flow_fields = {f for f in FlowSpec.__dataclass_fields__}
    flow_kw = {key: kwargs.pop(key) for key in list(kwargs) if key in flow_fields and key not in ("src", "dst")}
    flow_kw.setdefault("fec", 35)
    flow_kw.setdefault("rate_bps", 2_000_000)
    flow = FlowSpec(src=route.nodes[0], dst=route.nodes[-1], **flow_kw)
    spec = ScenarioSpec(topology=t, flows=(flow,), gos_nodes=gos, **kwargs)
    return spec


def random_flows(t: Topology, gos_nodes: Iterable[str], count: int, rng: random.Random,
                 min_gos_hops: int = 0, level: int = 1, size: int = 1000, first_fec: int = 35,
                 max_tries: int = 10_000) -> tuple[FlowSpec, ...]:
    """LER-to-LER flows with rates drawn uniformly from the 64 kbps - 4 Mbps range."""
    gos = set(gos_nodes)
    lers = sorted(n.id for n in t.nodes if n.kind is NodeKind.LER)
    flows = []
    used = set()
    for _ in range(max_tries):
        if len(flows) == count:
            break
        src, dst = rng.sample(lers, 2)
        if (src, dst) in used:
            continue
        route = shortest_delay_path(t, src, dst)
        if sum(n in gos for n in route.nodes) < min_gos_hops:
            continue
        used.add((src, dst))
        rate = round(rng.uniform(*RATE_RANGE_BPS))
        flows.append(FlowSpec(first_fec + len(flows), src, dst, rate, size, level))
    if len(flows) < count:
        raise ScenarioError([f"flows random: only {len(flows)} of {count} flows satisfy min_gos={min_gos_hops}"])
    return tuple(flows)


# -- scenario file -------------------------------------------------------------------------

def _kv(tokens: list[str], where: str, errors: list[str]) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            errors.append(f"{where}: expected key=value, got {tok!r}")
            continue
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def _num(value: str, where: str, errors: list[str], cast=float):
    try:
        x = float(value)
    except ValueError:
        errors.append(f"{where}: {value!r} is not a number")
        return None
    if cast is int:
        if x != int(x):
            errors.append(f"{where}: {value!r} is not an integer")
            return None
        return int(x)
    return x


def parse_scenario(text: str, base_dir: str | Path = ".", source: str = "<scenario>") -> ScenarioSpec:
    """Parse the line-oriented scenario format (see README) into a validated ScenarioSpec."""
    errors: list[str] = []
    base_dir = Path(base_dir)
    topo: Topology | None = None
    topo_line = None
    gos_rule = ("none",)
    gos_line = None
    flows: list[FlowSpec] = []
    flow_lines: list[int] = []
    random_rule = None
    opts: dict = {}
    drop = DropSpec()
    forced: list[tuple[str, int, int]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        at = f"{source}:{lineno}"
        try:
            toks = shlex.split(line)
        except ValueError as exc:
            errors.append(f"{at}: {exc}")
            continue
        key, args = toks[0], toks[1:]
        if key == "topology":
            topo_line = lineno
            if args[:2] == ["generate", "att_like"]:
                kv = _kv(args[2:], f"{at}: topology", errors)
                seed = _num(kv.get("seed", "1"), f"{at}: topology.seed", errors, int)
                if seed is not None:
                    topo = generate_att_like(seed)
            elif args[:1] == ["line"]:
                kv = _kv(args[1:], f"{at}: topology", errors)
                n = _num(kv.get("nodes", "5"), f"{at}: topology.nodes", errors, int)
                d = _num(kv.get("delay_us", "1"), f"{at}: topology.delay_us", errors, int)
                c = _num(kv.get("capacity_bps", "1e9"), f"{at}: topology.capacity_bps", errors, int)
                if None not in (n, d, c):
                    try:
                        topo = line_topology(n, d, c)
                    except TopologyError as exc:
                        errors.append(f"{at}: topology: {exc}")
            elif len(args) == 2 and args[0] == "file":
                path = base_dir / args[1]
                try:
                    topo = parse_topology(path.read_text())
                except OSError as exc:
                    errors.append(f"{at}: topology: cannot read {path}: {exc.strerror}")
                except TopologyError as exc:
                    errors.append(f"{at}: topology: {path}: {exc}")
            else:
                errors.append(f"{at}: topology: expected 'generate att_like seed=N', 'line ...' or 'file PATH'")
        elif key == "gos_nodes":
            gos_line = lineno
            if not args:
                errors.append(f"{at}: gos_nodes: missing rule")
            elif args[0] in ("top_degree", "spacing") and len(args) == 2:
                k = _num(args[1], f"{at}: gos_nodes.{args[0]}", errors, int)
                gos_rule = (args[0], k)
            elif args[0] == "list":
                gos_rule = ("list", tuple(args[1:]))
            elif args[0] in ("all", "none", "topology") and len(args) == 1:
                gos_rule = (args[0],)
            else:
                errors.append(f"{at}: gos_nodes: expected top_degree K | spacing K | list IDS | all | none | topology")
        elif key == "flow":
            kv = _kv(args, f"{at}: flow", errors)
            where = f"{at}: flows[{len(flows)}]"
            unknown = set(kv) - {"fec", "src", "dst", "rate_bps", "size", "level", "start_s", "stop_s", "window", "packets"}
            for u in sorted(unknown):
                errors.append(f"{where}.{u}: unknown field")
            missing = {"fec", "src", "dst", "rate_bps"} - set(kv)
            for m in sorted(missing):
                errors.append(f"{where}.{m}: required")
            if missing:
                continue
            vals = dict(
                fec=_num(kv["fec"], f"{where}.fec", errors, int),
                rate_bps=_num(kv["rate_bps"], f"{where}.rate_bps", errors),
                packet_size_bytes=_num(kv.get("size", "1000"), f"{where}.size", errors, int),
                level=_num(kv.get("level", "1"), f"{where}.level", errors, int),
                start_s=_num(kv.get("start_s", "0"), f"{where}.start_s", errors),
                stop_s=_num(kv["stop_s"], f"{where}.stop_s", errors) if "stop_s" in kv else None,
                window=_num(kv["window"], f"{where}.window", errors, int) if "window" in kv else None,
                packets=_num(kv["packets"], f"{where}.packets", errors, int) if "packets" in kv else None,
            )
            if any(vals[k] is None for k in ("fec", "rate_bps", "packet_size_bytes", "level", "start_s")):
                continue
            flows.append(FlowSpec(src=kv["src"], dst=kv["dst"], **vals))
            flow_lines.append(lineno)
        elif key == "flows" and args[:1] == ["random"]:
            kv = _kv(args[1:], f"{at}: flows", errors)
            random_rule = (lineno, {k: _num(v, f"{at}: flows.{k}", errors, int) for k, v in kv.items()})
        elif key == "drop":
            if args == ["none"]:
                drop = DropSpec()
            elif args[:1] == ["bernoulli"]:
                kv = _kv(args[1:], f"{at}: drop", errors)
                rate = kv.get("rate", "0")
                lo, _, hi = rate.partition("..")
                r_lo = _num(lo, f"{at}: drop.rate", errors)
                r_hi = _num(hi, f"{at}: drop.rate", errors) if hi else r_lo
                nodes = kv.get("nodes", "all")
                sel = nodes if nodes in ("all", "lsr", "gos") else tuple(n for n in nodes.split(",") if n)
                if r_lo is not None and r_hi is not None:
                    drop = DropSpec("bernoulli", (r_lo, r_hi), sel)
            elif args[:1] == ["queue"]:
                kv = _kv(args[1:], f"{at}: drop", errors)
                cap = _num(kv.get("cap", "0"), f"{at}: drop.cap", errors, int)
                drop = DropSpec("queue", cap=cap or 0)
            else:
                errors.append(f"{at}: drop: expected 'bernoulli rate=R[..R2] nodes=...', 'queue cap=N' or 'none'")
        elif key in ("duration_s", "sample_interval_s"):
            if len(args) != 1:
                errors.append(f"{at}: {key}: expected one value")
            else:
                opts[key] = _num(args[0], f"{at}: {key}", errors)
        elif key in ("gos_buffer_bytes", "reorder_window", "ack_timeout_factor", "level_unit_bytes"):
            if len(args) != 1:
                errors.append(f"{at}: {key}: expected one value")
            else:
                opts[key] = _num(args[0], f"{at}: {key}", errors, int)
        elif key == "gos":
            if args not in (["on"], ["off"]):
                errors.append(f"{at}: gos: expected on or off")
            else:
                opts["gos_enabled"] = args == ["on"]
        elif key == "force_drop":
            if len(args) != 3:
                errors.append(f"{at}: force_drop: expected NODE FEC PID")
            else:
                fec = _num(args[1], f"{at}: force_drop.fec", errors, int)
                pid = _num(args[2], f"{at}: force_drop.pid", errors, int)
                if None not in (fec, pid):
                    forced.append((args[0], fec, pid))
        elif key in ("arrival", "e2e_detect"):
            if len(args) != 1:
                errors.append(f"{at}: {key}: expected one value")
            else:
                opts[key] = args[0]
        else:
            errors.append(f"{at}: unknown directive {key!r}")

    if topo is None and topo_line is None:
        errors.append(f"{source}: topology: missing")
    if errors:
        raise ScenarioError(errors)
    if topo is None:
        raise ScenarioError(errors or [f"{source}:{topo_line}: topology: could not be built"])
    opts = {k: v for k, v in opts.items() if v is not None}

    gos_at = f"{source}:{gos_line}: gos_nodes" if gos_line else f"{source}: gos_nodes"
    rule = gos_rule[0]
    gos: tuple[str, ...] = ()
    if rule == "top_degree":
        try:
            gos = tuple(place_gos_nodes(topo, gos_rule[1]))
        except TopologyError as exc:
            raise ScenarioError([f"{gos_at}: {exc}"]) from None
    elif rule == "list":
        gos = gos_rule[1]
    elif rule == "all":
        gos = tuple(n.id for n in topo.nodes)
    elif rule == "topology":
        gos = tuple(n.id for n in topo.nodes if n.gos_capable)

    if random_rule is not None:
        lineno, kv = random_rule
        try:
            flows = list(random_flows(topo, gos, kv.get("count", 4) or 4, random.Random(kv.get("seed", 1)),
                                      min_gos_hops=kv.get("min_gos", 0) or 0, level=kv.get("level", 1) or 1,
                                      size=kv.get("size", 1000) or 1000))
        except (ScenarioError, ValueError) as exc:
            raise ScenarioError([f"{source}:{lineno}: {exc}"]) from None

    if rule == "spacing":
        if not flows:
            raise ScenarioError([f"{gos_at}: spacing needs at least one flow"])
        try:
            route = shortest_delay_path(topo, flows[0].src, flows[0].dst)
            gos = tuple(route.nodes[p] for p in spacing_positions(len(route.nodes), gos_rule[1]))
        except (TopologyError, ValueError) as exc:
            raise ScenarioError([f"{gos_at}: {exc}"]) from None

    spec = ScenarioSpec(topology=topo, flows=tuple(flows), gos_nodes=gos, drop=drop,
                        forced_drops=tuple(forced), **opts)
    try:
        spec.validate()
    except ScenarioError as exc:
        located = []
        for msg in exc.errors:
            if msg.startswith("flows["):
                k = int(msg[6:msg.index("]")])
                if k < len(flow_lines) and random_rule is None:
                    msg = f"{source}:{flow_lines[k]}: {msg}"
                else:
                    msg = f"{source}: {msg}"
            elif msg.startswith("gos_nodes"):
                msg = f"{gos_at}{msg[len('gos_nodes'):]}"
            else:
                msg = f"{source}: {msg}"
            located.append(msg)
        raise ScenarioError(located) from None
    return spec


def load_scenario(path: str | Path) -> ScenarioSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError([f"{path}: cannot read scenario: {exc.strerror}"]) from None
    return parse_scenario(text, path.parent, str(path))


# -- metrics ---------------------------------------------------------------------------------

@dataclass
class FlowSeries:
    fec: int
    planned: int
    throughput_bps: list[float] = field(default_factory=list)
    delivered: list[int] = field(default_factory=list)
    emitted: list[int] = field(default_factory=list)
    delivered_fraction: list[float] = field(default_factory=list)
    headend_retx: list[int] = field(default_factory=list)
    headend_loss: list[float] = field(default_factory=list)


@dataclass
class ConservationSample:
    time_us: int
    fec: int
    emitted: int
    delivered: int
    in_flight: int
    buffered: int
    dropped_unrecovered: int
    unaccounted: int

    @property
    def holds(self) -> bool:
        return self.unaccounted == 0 and self.emitted == (
            self.delivered + self.in_flight + self.buffered + self.dropped_unrecovered)


@dataclass
class MetricsSeries:
    sample_times_s: list[float]
    flows: dict[int, FlowSeries]
    diameter_histogram: dict[int, int]
    recovery_latencies_us: list[int]
    exhausted: int
    totals: dict[str, int]
    transitions: dict[tuple[str, str], int]
    conservation: list[ConservationSample] = field(default_factory=list)

    def aggregate(self, name: str) -> list[float]:
        """Sum a per-flow series across flows, sample by sample."""
        cols = [getattr(f, name) for f in self.flows.values()]
        return [sum(v) for v in zip(*cols)] if cols else []

    def aggregate_delivered_fraction(self) -> list[float]:
        planned = sum(f.planned for f in self.flows.values())
        return [d / planned if planned else 0.0 for d in self.aggregate("delivered")]

    def aggregate_headend_loss(self) -> list[float]:
        return [r / e if e else 0.0 for r, e in zip(self.aggregate("headend_retx"), self.aggregate("emitted"))]

    def mean_throughput_bps(self) -> float:
        agg = self.aggregate("throughput_bps")
        return float(sum(agg) / len(agg)) if agg else 0.0

    @property
    def recoveries(self) -> int:
        return sum(self.diameter_histogram.values())

    def conservation_holds(self) -> bool:
        return all(s.holds for s in self.conservation)


class TrafficSource:
    def __init__(self, flow: FlowSpec, start_us: int, stop_us: int, planned: int, poisson_rng=None):
        self.interval = flow.interval_us()
        self.start_us = start_us
        self.stop_us = stop_us
        self.planned = planned
        self.rng = poisson_rng

    def active(self, now: int, next_pid: int) -> bool:
        return now < self.stop_us and next_pid < self.planned

    def next_interval(self) -> int:
        if self.rng is None:
            return self.interval
        return max(1, round(self.rng.expovariate(1.0 / self.interval)))


def _drop_rates(spec: ScenarioSpec, topo: Topology, seed: int) -> dict[int, float]:
    d = spec.drop
    index = {n.id: k for k, n in enumerate(topo.nodes)}
    if isinstance(d.nodes, str):
        if d.nodes == "all":
            chosen = [n.id for n in topo.nodes]
        elif d.nodes == "lsr":
            chosen = [n.id for n in topo.nodes if n.kind is NodeKind.LSR]
        else:
            chosen = list(spec.gos_nodes)
    else:
        chosen = list(d.nodes)
    rng = random.Random(f"drop-rates:{seed}")
    rates = {}
    for nid in sorted(chosen):
        lo, hi = d.rate
        rates[index[nid]] = lo if lo == hi else rng.uniform(lo, hi)
    return rates


class _ForcedDrops:
    def __init__(self, inner, forced: set[tuple[int, int, int]]):
        self.inner = inner
        self.forced = forced

    def arrival_drop(self, node_index, node, pkt, now):
        if pkt.gen == 0 and (node_index, pkt.fec, pkt.packet_id) in self.forced:
            return True
        return self.inner is not None and self.inner.arrival_drop(node_index, node, pkt, now)

    def enqueue(self, node, next_hop, size_bytes, now):
        return 0 if self.inner is None else self.inner.enqueue(node, next_hop, size_bytes, now)


@dataclass
class Run:
    """A finished run with its live objects, for tests that inspect internals."""
    metrics: MetricsSeries
    engine: ForwardingEngine
    control: ControlPlane
    loop: EventLoop
    trace: list[str] | None


def simulate(spec: ScenarioSpec, seed: int = 1, trace: bool = False,
             check_conservation: bool = False) -> Run:
    spec.validate()
    topo = spec.topology.with_gos(spec.gos_nodes, spec.gos_buffer_bytes) if spec.gos_nodes else \
        spec.topology.with_gos((), 0)
    cp = ControlPlane(topo, level_unit_bytes=spec.level_unit_bytes)
    loop = EventLoop()
    lines: list[str] | None = [] if trace else None

    dm = None
    if spec.drop.kind == "bernoulli":
        dm = BernoulliDrops(_drop_rates(spec, topo, seed), seed)
    elif spec.drop.kind == "queue":
        dm = QueueDrops(topo, spec.drop.cap)
    if spec.forced_drops:
        index = {n.id: k for k, n in enumerate(topo.nodes)}
        dm = _ForcedDrops(dm, {(index[n], fec, pid) for n, fec, pid in spec.forced_drops})

    eng = ForwardingEngine(cp, loop.schedule, dm, gos_enabled=spec.gos_enabled,
                           reorder_window=spec.reorder_window, ack_timeout_factor=spec.ack_timeout_factor,
                           e2e_detect=spec.e2e_detect, trace=lines.append if lines is not None else None)
    duration_us = round(spec.duration_s * US)
    rng = random.Random(f"arrivals:{seed}")
    series: dict[int, FlowSeries] = {}
    for f in spec.flows:
        route = shortest_delay_path(topo, f.src, f.dst)
        lsp = cp.signal_lsp(route, f.fec, f.level if spec.gos_enabled else 0)
        start = round(f.start_s * US)
        stop = round((f.stop_s if f.stop_s is not None else spec.duration_s) * US)
        planned = f.packets if f.packets is not None else max(1, (stop - start) // f.interval_us())
        rtt = 2 * route.total_delay_us
        window = f.window if f.window is not None else max(4, math.ceil(rtt / f.interval_us()) + 1)
        src = TrafficSource(f, start, stop, planned, rng if spec.arrival == "poisson" else None)
        eng.add_flow(lsp, f.packet_size_bytes, window, src)
        eng.start_flow(f.fec, start)
        series[f.fec] = FlowSeries(f.fec, planned)

    interval_us = max(1, round(spec.sample_interval_s * US))
    times: list[float] = []
    conservation: list[ConservationSample] = []
    last_bytes = {fec: 0 for fec in series}

    def sample(now: int) -> None:
        times.append(now / US)
        for fec, s in series.items():
            fl = eng.flows[fec]
            delta = fl.delivered_bytes - last_bytes[fec]
            last_bytes[fec] = fl.delivered_bytes
            s.throughput_bps.append(delta * 8 * US / interval_us)
            s.delivered.append(len(fl.sink.delivered))
            s.emitted.append(fl.emitted)
            s.delivered_fraction.append(len(fl.sink.delivered) / s.planned)
            s.headend_retx.append(fl.head.retransmissions)
            s.headend_loss.append(fl.head.retransmissions / fl.emitted if fl.emitted else 0.0)
        if check_conservation:
            conservation.extend(_conservation(eng, loop, now))
        for rt in eng.rt.values():
            if rt.win_in > rt.win_out:
                eng.counts["congested_windows"] += 1
            rt.win_in = rt.win_out = 0

    def dispatch(t, kind, payload):
        if kind == EV_SAMPLE:
            sample(t)
            if t + interval_us <= duration_us:
                loop.schedule(t + interval_us, EV_SAMPLE)
        else:
            eng.dispatch(t, kind, payload)

    loop.schedule(interval_us, EV_SAMPLE)
    loop.run(duration_us, dispatch)

    hist = Counter(r.diameter for r in eng.records if r.outcome is Outcome.RECOVERED)
    metrics = MetricsSeries(
        sample_times_s=times,
        flows=series,
        diameter_histogram=dict(sorted(hist.items())),
        recovery_latencies_us=[r.latency for r in eng.records if r.latency is not None],
        exhausted=sum(r.outcome is Outcome.EXHAUSTED for r in eng.records),
        totals={**dict(sorted(eng.counts.items())), "events": loop.processed,
                "emitted": sum(f.emitted for f in eng.flows.values()),
                "delivered": sum(len(f.sink.delivered) for f in eng.flows.values())},
        transitions={(a.value, b.value): n for (a, b), n in sorted(eng.transitions.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value))},
        conservation=conservation,
    )
    metrics.totals.pop("serve_serial", None)
    return Run(metrics, eng, cp, loop, lines)


def _conservation(eng: ForwardingEngine, loop: EventLoop, now: int) -> list[ConservationSample]:
    in_transit: dict[int, set[int]] = {}
    for ev in loop.pending():
        if ev.kind == EV_PACKET:
            pkt = ev.payload[1]
            in_transit.setdefault(pkt.fec, set()).add(pkt.packet_id)
    out = []
    for fec, fl in eng.flows.items():
        moving = in_transit.get(fec, set())
        in_flight = buffered = dropped = unaccounted = 0
        for pid in fl.outstanding:
            if pid in moving:
                in_flight += 1
            elif pid in fl.recovering:
                buffered += 1
            elif pid in fl.lost:
                dropped += 1
            else:
                unaccounted += 1
        out.append(ConservationSample(now, fec, fl.emitted, len(fl.sink.delivered), in_flight, buffered,
                                      dropped, unaccounted))
    return out


def run_scenario(scenario: ScenarioSpec, seed: int = 1, check_conservation: bool = False) -> MetricsSeries:
    return simulate(scenario, seed, check_conservation=check_conservation).metrics


# -- paired GoS / end-to-end comparison ---------------------------------------------------

@dataclass
class Trend:
    slope: float
    intercept: float

    def __call__(self, x):
        return self.slope * np.asarray(x, dtype=float) + self.intercept


def fit_trend(xs, ys) -> Trend:
    if len(xs) < 2:
        return Trend(0.0, float(ys[0]) if len(ys) else 0.0)
    slope, intercept = np.polyfit(np.asarray(xs, float), np.asarray(ys, float), 1)
    return Trend(float(slope), float(intercept))


@dataclass
class SeedComparison:
    seed: int
    gos_throughput_bps: float
    e2e_throughput_bps: float
    gos_loss: float
    e2e_loss: float
    delivered_delta: list[float]
    gos_recoveries: int
    conservation_ok: bool = True

    @property
    def throughput_delta(self) -> float:
        return self.gos_throughput_bps - self.e2e_throughput_bps

    @property
    def loss_delta(self) -> float:
        return self.gos_loss - self.e2e_loss


@dataclass
class ComparisonReport:
    seeds: list[SeedComparison]
    sample_times_s: list[float]
    gos_throughput: list[float]      # mean aggregate throughput per sample, across seeds
    e2e_throughput: list[float]
    gos_loss: list[float]
    e2e_loss: list[float]
    throughput_trend: tuple[Trend, Trend]
    loss_trend: tuple[Trend, Trend]

    @property
    def mean_throughput_delta(self) -> float:
        return float(np.mean([s.throughput_delta for s in self.seeds]))

    @property
    def mean_loss_delta(self) -> float:
        return float(np.mean([s.loss_delta for s in self.seeds]))

    def trend_gap_percent(self) -> float:
        """Average relative gap between the GoS and E-E throughput trend lines."""
        g, e = self.throughput_trend
        ref = e(self.sample_times_s)
        ok = ref != 0
        if not ok.any():
            return 0.0
        return float(np.mean((g(self.sample_times_s)[ok] - ref[ok]) / ref[ok]) * 100)

    def loss_trend_gap_points(self) -> float:
        """Average gap between the E-E and GoS loss trend lines, in percentage points."""
        g, e = self.loss_trend
        return float(np.mean(e(self.sample_times_s) - g(self.sample_times_s)) * 100)


def _paired(args) -> tuple[int, MetricsSeries, MetricsSeries]:
    scenario, seed, audit = args
    gos = run_scenario(replace(scenario, gos_enabled=True), seed, audit)
    e2e = run_scenario(replace(scenario, gos_enabled=False), seed, audit)
    return seed, gos, e2e


def compare_gos_vs_e2e(scenario: ScenarioSpec, seeds: Iterable[int], workers: int = 1,
                       check_conservation: bool = False) -> ComparisonReport:
    """Run each seed with GoS on and off; both runs share the seed's drop coins."""
    seeds = sorted(seeds)
    jobs = [(scenario, s, check_conservation) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_paired, jobs))
    else:
        results = [_paired(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    rows = []
    for seed, g, e in results:
        gl, el = g.aggregate_headend_loss(), e.aggregate_headend_loss()
        rows.append(SeedComparison(
            seed, g.mean_throughput_bps(), e.mean_throughput_bps(),
            gl[-1] if gl else 0.0, el[-1] if el else 0.0,
            [a - b for a, b in zip(g.aggregate_delivered_fraction(), e.aggregate_delivered_fraction())],
            g.recoveries,
            g.conservation_holds() and e.conservation_holds(),
        ))
    times = results[0][1].sample_times_s if results else []
    mean = lambda series: [float(v) for v in np.mean(np.array(series, dtype=float), axis=0)] if series else []
    gt = mean([g.aggregate("throughput_bps") for _, g, _ in results])
    et = mean([e.aggregate("throughput_bps") for _, _, e in results])
    gls = mean([g.aggregate_headend_loss() for _, g, _ in results])
    els = mean([e.aggregate_headend_loss() for _, _, e in results])
    return ComparisonReport(rows, times, gt, et, gls, els,
                            (fit_trend(times, gt), fit_trend(times, et)),
                            (fit_trend(times, gls), fit_trend(times, els)))
