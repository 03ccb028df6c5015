"""Directed-graph model of an MPLS domain.

Holds node and link specs, the line-oriented topology file format, a seeded
generator for an AT&T-like backbone, minimum-delay routing and GoS node
placement by degree.
"""

from __future__ import annotations

import heapq
import ipaddress
import math
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping


class TopologyError(ValueError):
    """Raised for malformed or inconsistent topologies."""


class Unreachable(TopologyError):
    pass


class NodeKind(str, Enum):
    LER = "LER"
    LSR = "LSR"


@dataclass(frozen=True)
class NodeSpec:
    id: str
    address: str
    kind: NodeKind
    gos_capable: bool = False
    gos_buffer_bytes: int = 0

    @property
    def address_int(self) -> int:
        return int(ipaddress.IPv4Address(self.address))


@dataclass(frozen=True)
class LinkSpec:
    src: str
    dst: str
    delay_us: int
    capacity_bps: int


@dataclass(frozen=True)
class RoutePath:
    """A loop-free route; ``link_delays[k]`` is the delay of hop nodes[k] -> nodes[k+1]."""

    nodes: tuple[str, ...]
    total_delay_us: int
    link_delays: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.link_delays) != max(len(self.nodes) - 1, 0):
            raise TopologyError("link_delays must have one entry per hop")
        if sum(self.link_delays) != self.total_delay_us:
            raise TopologyError("total_delay_us must equal the sum of link delays")
        if len(set(self.nodes)) != len(self.nodes):
            raise TopologyError("route repeats a node")

    @property
    def hops(self) -> int:
        return len(self.nodes) - 1

    def arcs(self) -> set[tuple[str, str]]:
        """Indicator encoding: the arcs (i, j) with x_ij = 1."""
        return set(zip(self.nodes, self.nodes[1:]))

    def delay_between(self, a: int, b: int) -> int:
        """Delay from route position ``a`` to position ``b`` (a <= b)."""
        return sum(self.link_delays[a:b])


@dataclass(frozen=True)
class Topology:
    nodes: tuple[NodeSpec, ...]
    links: tuple[LinkSpec, ...]
    _index: dict = field(default=None, compare=False, repr=False)
    _adj: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        index: dict[str, NodeSpec] = {}
        addresses: set[str] = set()
        for n in self.nodes:
            if n.id in index:
                raise TopologyError(f"duplicate node id {n.id!r}")
            if n.address in addresses:
                raise TopologyError(f"duplicate address {n.address} (node {n.id!r})")
            if n.gos_capable and n.gos_buffer_bytes <= 0:
                raise TopologyError(f"GoS node {n.id!r} needs a positive buffer")
            index[n.id] = n
            addresses.add(n.address)
        adj: dict[str, dict[str, LinkSpec]] = {n.id: {} for n in self.nodes}
        for ln in self.links:
            for end in (ln.src, ln.dst):
                if end not in index:
                    raise TopologyError(f"link endpoint {end!r} is not a declared node")
            if ln.src == ln.dst:
                raise TopologyError(f"self-loop on {ln.src!r}")
            if ln.delay_us <= 0 or ln.capacity_bps <= 0:
                raise TopologyError(f"link {ln.src}->{ln.dst}: delay and capacity must be positive")
            if ln.dst in adj[ln.src]:
                raise TopologyError(f"duplicate link {ln.src}->{ln.dst}")
            adj[ln.src][ln.dst] = ln
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_adj", adj)

    def node(self, node_id: str) -> NodeSpec:
        try:
            return self._index[node_id]
        except KeyError:
            raise TopologyError(f"unknown node {node_id!r}") from None

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._index

    def link(self, src: str, dst: str) -> LinkSpec:
        try:
            return self._adj[src][dst]
        except KeyError:
            raise TopologyError(f"no link {src}->{dst}") from None

    def successors(self, node_id: str) -> Mapping[str, LinkSpec]:
        return self._adj[node_id]

    def neighbors(self, node_id: str) -> set[str]:
        out = set(self._adj[node_id])
        out.update(s for s, nbrs in self._adj.items() if node_id in nbrs)
        return out

    def degree(self, node_id: str) -> int:
        """Number of distinct adjacent nodes, ignoring link direction."""
        return len(self.neighbors(node_id))

    def degrees(self) -> dict[str, int]:
        nbrs: dict[str, set[str]] = {n.id: set() for n in self.nodes}
        for ln in self.links:
            nbrs[ln.src].add(ln.dst)
            nbrs[ln.dst].add(ln.src)
        return {k: len(v) for k, v in nbrs.items()}

    def undirected_link_count(self) -> int:
        return len({frozenset((ln.src, ln.dst)) for ln in self.links})

    def is_connected(self) -> bool:
        if not self.nodes:
            return True
        nbrs: dict[str, set[str]] = {n.id: set() for n in self.nodes}
        for ln in self.links:
            nbrs[ln.src].add(ln.dst)
            nbrs[ln.dst].add(ln.src)
        start = self.nodes[0].id
        seen = {start}
        stack = [start]
        while stack:
            for m in nbrs[stack.pop()]:
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        return len(seen) == len(self.nodes)

    def route(self, node_ids: Iterable[str]) -> RoutePath:
        """Build a RoutePath over an explicit node sequence, validating each hop."""
        ids = tuple(node_ids)
        delays = tuple(self.link(a, b).delay_us for a, b in zip(ids, ids[1:]))
        return RoutePath(ids, sum(delays), delays)

    def with_gos(self, gos_nodes: Iterable[str], buffer_bytes: int) -> "Topology":
        """Copy of this topology where exactly ``gos_nodes`` are GoS-capable."""
        chosen = set(gos_nodes)
        for nid in chosen:
            self.node(nid)
        nodes = tuple(
            replace(n, gos_capable=n.id in chosen, gos_buffer_bytes=buffer_bytes if n.id in chosen else 0)
            for n in self.nodes
        )
        return Topology(nodes, self.links)


# -- file format -------------------------------------------------------------

def _parse_int(tok: str, what: str, lineno: int) -> int:
    try:
        value = float(tok) if any(c in tok for c in ".eE") else int(tok)
    except ValueError:
        raise TopologyError(f"line {lineno}: {what} {tok!r} is not a number") from None
    if value != int(value):
        raise TopologyError(f"line {lineno}: {what} {tok!r} is not an integer")
    return int(value)


def parse_topology(text: str) -> Topology:
    nodes: list[NodeSpec] = []
    links: list[LinkSpec] = []
    seen_ids: dict[str, int] = {}
    link_lines: list[tuple[int, LinkSpec]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if toks[0] == "node":
            if len(toks) != 6:
                raise TopologyError(f"line {lineno}: expected 'node <id> <addr> <LER|LSR> <gos:0|1> <buffer-bytes>'")
            _, nid, addr, kind, gos, buf = toks
            if nid in seen_ids:
                raise TopologyError(f"line {lineno}: duplicate node id {nid!r} (first on line {seen_ids[nid]})")
            try:
                addr = str(ipaddress.IPv4Address(addr))
            except ValueError:
                raise TopologyError(f"line {lineno}: bad address {addr!r}") from None
            if kind not in ("LER", "LSR"):
                raise TopologyError(f"line {lineno}: node kind must be LER or LSR, got {kind!r}")
            if gos not in ("0", "1"):
                raise TopologyError(f"line {lineno}: gos flag must be 0 or 1, got {gos!r}")
            buf_bytes = _parse_int(buf, "buffer size", lineno)
            if buf_bytes < 0 or (gos == "1" and buf_bytes == 0):
                raise TopologyError(f"line {lineno}: GoS node {nid!r} needs a positive buffer size")
            seen_ids[nid] = lineno
            nodes.append(NodeSpec(nid, addr, NodeKind(kind), gos == "1", buf_bytes))
        elif toks[0] == "link":
            if len(toks) != 5:
                raise TopologyError(f"line {lineno}: expected 'link <from> <to> <delay_us> <capacity_bps>'")
            _, a, b, delay, cap = toks
            delay_us = _parse_int(delay, "delay", lineno)
            cap_bps = _parse_int(cap, "capacity", lineno)
            if delay_us <= 0:
                raise TopologyError(f"line {lineno}: non-positive delay {delay_us}")
            if cap_bps <= 0:
                raise TopologyError(f"line {lineno}: non-positive capacity {cap_bps}")
            if a == b:
                raise TopologyError(f"line {lineno}: self-loop on {a!r}")
            link_lines.append((lineno, LinkSpec(a, b, delay_us, cap_bps)))
        else:
            raise TopologyError(f"line {lineno}: unknown directive {toks[0]!r}")
    pairs: set[tuple[str, str]] = set()
    for lineno, ln in link_lines:
        for end in (ln.src, ln.dst):
            if end not in seen_ids:
                raise TopologyError(f"line {lineno}: link endpoint {end!r} is not a declared node")
        if (ln.src, ln.dst) in pairs:
            raise TopologyError(f"line {lineno}: duplicate link {ln.src}->{ln.dst}")
        pairs.add((ln.src, ln.dst))
        links.append(ln)
    return Topology(tuple(nodes), tuple(links))


def serialize_topology(t: Topology) -> str:
    out = [f"# {len(t.nodes)} nodes, {len(t.links)} unidirectional links"]
    for n in t.nodes:
        out.append(f"node {n.id} {n.address} {n.kind.value} {int(n.gos_capable)} {n.gos_buffer_bytes}")
    for ln in t.links:
        out.append(f"link {ln.src} {ln.dst} {ln.delay_us} {ln.capacity_bps}")
    return "\n".join(out) + "\n"


def line_topology(n_nodes: int, delay_us: int = 1, capacity_bps: int = 1_000_000_000,
                  prefix: str = "X") -> Topology:
    """Bidirectional chain X1 - X2 - ... - Xn; both ends are LERs."""
    if n_nodes < 2:
        raise TopologyError("a line needs at least two nodes")
    ids = [f"{prefix}{k}" for k in range(1, n_nodes + 1)]
    nodes = tuple(
        NodeSpec(nid, str(ipaddress.IPv4Address((10 << 24) | (160 << 8) | k)),
                 NodeKind.LER if k in (0, n_nodes - 1) else NodeKind.LSR)
        for k, nid in enumerate(ids)
    )
    links = []
    for a, b in zip(ids, ids[1:]):
        links.append(LinkSpec(a, b, delay_us, capacity_bps))
        links.append(LinkSpec(b, a, delay_us, capacity_bps))
    return Topology(nodes, tuple(links))


# -- AT&T-like generator -----------------------------------------------------

N_LSR = 30
N_LER = 120
N_LINKS = 180
CAPACITY_RANGE = (45_000_000, 2_500_000_000)
_AREA_KM = (4000.0, 2000.0)
_US_PER_KM = 5          # light in fiber
_SWITCH_US = 50         # fixed per-hop processing/transmission share


def generate_att_like(seed: int) -> Topology:
    """Seeded 150-node backbone: a 30-LSR core mesh with 120 LERs homed on it.

    The core is a nearest-neighbour spanning tree plus short chords, so the
    LSRs carry all transit degree. Every LER hangs off its closest LSR.
    """
    rng = random.Random(seed)
    pos = {}
    core = [f"LSR{k:02d}" for k in range(1, N_LSR + 1)]
    edge = [f"LER{k:03d}" for k in range(1, N_LER + 1)]
    for nid in core + edge:
        pos[nid] = (rng.uniform(0, _AREA_KM[0]), rng.uniform(0, _AREA_KM[1]))

    def dist(a, b):
        return math.dist(pos[a], pos[b])

    pairs: list[tuple[str, str]] = []
    linked: set[frozenset] = set()

    def add(a, b):
        linked.add(frozenset((a, b)))
        pairs.append((a, b))

    order = core[:]
    rng.shuffle(order)
    in_tree = [order[0]]
    for nid in order[1:]:
        nearest = min(in_tree, key=lambda m: (dist(nid, m), m))
        add(nearest, nid)
        in_tree.append(nid)

    n_chords = N_LINKS - N_LER - (N_LSR - 1)
    while n_chords:
        a = rng.choice(core)
        candidates = sorted((m for m in core if m != a and frozenset((a, m)) not in linked),
                            key=lambda m: (dist(a, m), m))[:4]
        if not candidates:
            continue
        add(a, rng.choice(candidates))
        n_chords -= 1

    for nid in edge:
        add(min(core, key=lambda m: (dist(nid, m), m)), nid)

    nodes = [NodeSpec(nid, f"10.0.0.{k}", NodeKind.LSR) for k, nid in enumerate(core, start=1)]
    nodes += [NodeSpec(nid, f"10.1.{k // 256}.{k % 256}", NodeKind.LER) for k, nid in enumerate(edge, start=1)]
    links = []
    for a, b in pairs:
        delay = _SWITCH_US + round(_US_PER_KM * dist(a, b))
        cap = rng.randint(*CAPACITY_RANGE)
        links.append(LinkSpec(a, b, delay, cap))
        links.append(LinkSpec(b, a, delay, cap))
    return Topology(tuple(nodes), tuple(links))


# -- routing -----------------------------------------------------------------

def shortest_delay_path(t: Topology, src: str, dst: str) -> RoutePath:
    """Minimum-delay route by Dijkstra; equal-delay ties resolve to the smaller node-id sequence."""
    t.node(src)
    t.node(dst)
    if src == dst:
        raise TopologyError("source and destination must differ")
    best: dict[str, tuple[int, tuple[str, ...]]] = {src: (0, (src,))}
    heap = [(0, (src,))]
    done: set[str] = set()
    while heap:
        d, path = heapq.heappop(heap)
        u = path[-1]
        if u in done:
            continue
        done.add(u)
        if u == dst:
            return t.route(path)
        for v, ln in t.successors(u).items():
            if v in done:
                continue
            cand = (d + ln.delay_us, path + (v,))
            if v not in best or cand < best[v]:
                best[v] = cand
                heapq.heappush(heap, cand)
    raise Unreachable(f"{dst!r} is unreachable from {src!r}")


def check_path_constraints(arcs: set[tuple[str, str]], nodes: Iterable[str], src: str, dst: str) -> list[str]:
    """Check an arc-indicator set against the path LP constraints.

    Returns the violated constraints (empty when the arcs encode one
    src->dst path): one arc out of src and none in, unit flow conservation at
    every other node, one arc into dst and none out.
    """
    out_deg: dict[str, int] = {}
    in_deg: dict[str, int] = {}
    for a, b in arcs:
        out_deg[a] = out_deg.get(a, 0) + 1
        in_deg[b] = in_deg.get(b, 0) + 1
    problems = []
    if out_deg.get(src, 0) != 1 or in_deg.get(src, 0) != 0:
        problems.append(f"source {src}: out={out_deg.get(src, 0)} in={in_deg.get(src, 0)}")
    if in_deg.get(dst, 0) != 1 or out_deg.get(dst, 0) != 0:
        problems.append(f"sink {dst}: in={in_deg.get(dst, 0)} out={out_deg.get(dst, 0)}")
    for nid in nodes:
        if nid in (src, dst):
            continue
        if in_deg.get(nid, 0) != out_deg.get(nid, 0) or in_deg.get(nid, 0) > 1:
            problems.append(f"node {nid}: in={in_deg.get(nid, 0)} out={out_deg.get(nid, 0)}")
    return problems


def place_gos_nodes(t: Topology, k: int) -> list[str]:
    """The ``k`` highest-degree nodes, ties broken by ascending id."""
    if not 1 <= k <= len(t.nodes):
        raise TopologyError(f"k={k} outside [1, {len(t.nodes)}]")
    deg = t.degrees()
    return sorted(deg, key=lambda nid: (-deg[nid], nid))[:k]
