import random
import re
from dataclasses import replace
from types import SimpleNamespace

import pytest
from hypothesis import given, settings, strategies as st

from gosim import simulation as sim
from gosim.simulation import (
    BernoulliDrops, DropSpec, EventLoop, FlowSpec, ScenarioError, ScenarioSpec, parse_scenario,
)
from gosim.topology import generate_att_like, line_topology, place_gos_nodes

LINE9 = [f"X{k}" for k in range(1, 10)]


def line_spec(n=6, gos="all", drop=DropSpec(), duration=2.0, rate=1e6, **kw):
    t = line_topology(n, 1000)
    ids = [n.id for n in t.nodes]
    return ScenarioSpec(t, (FlowSpec(35, ids[0], ids[-1], rate),),
                        gos_nodes=tuple(ids) if gos == "all" else tuple(gos),
                        drop=drop, duration_s=duration, **kw)


class TestEventLoop:
    def test_ties_break_by_insertion(self):
        loop, seen = EventLoop(), []
        for tag in "abc":
            loop.schedule(5, 0, tag)
        loop.schedule(1, 0, "z")
        loop.run(10, lambda t, k, p: seen.append((t, p)))
        assert seen == [(1, "z"), (5, "a"), (5, "b"), (5, "c")]
        assert loop.processed == 4

    def test_stops_at_horizon(self):
        loop, seen = EventLoop(), []
        loop.schedule(3, 0)
        loop.schedule(11, 0)
        loop.run(10, lambda t, k, p: seen.append(t))
        assert seen == [3]
        assert [e.time for e in loop.pending()] == [11]

    @settings(max_examples=50)
    @given(st.lists(st.integers(0, 1000), min_size=1, max_size=60))
    def test_time_never_goes_backwards(self, times):
        loop, seen = EventLoop(), []

        def dispatch(t, k, p):
            seen.append(t)
            if p:                      # events may schedule more events at or after now
                loop.schedule(t + p, 0, 0)

        for x in times:
            loop.schedule(x, 0, x % 7)
        loop.run(10 ** 6, dispatch)
        assert seen == sorted(seen)


class TestBernoulli:
    def pkt(self, fec, pid, gen):
        return SimpleNamespace(fec=fec, packet_id=pid, gen=gen)

    def test_pure_function_of_identity(self):
        a = BernoulliDrops({0: 0.3, 1: 0.3}, seed=4)
        b = BernoulliDrops({0: 0.3, 1: 0.3}, seed=4)
        keys = [(n, 35, pid, g) for n in (0, 1) for pid in range(300) for g in (0, 1)]
        first = [a.arrival_drop(n, "x", self.pkt(f, p, g), 0) for n, f, p, g in keys]
        shuffled = keys[:]
        random.Random(1).shuffle(shuffled)
        second = dict(zip(shuffled, [b.arrival_drop(n, "x", self.pkt(f, p, g), 99) for n, f, p, g in shuffled]))
        assert first == [second[k] for k in keys]

    def test_rate_respected(self):
        d = BernoulliDrops({0: 0.05}, seed=9)
        hits = sum(d.arrival_drop(0, "x", self.pkt(1, pid, 0), 0) for pid in range(40000))
        assert 0.045 < hits / 40000 < 0.055

    def test_zero_and_unlisted_nodes_never_drop(self):
        d = BernoulliDrops({0: 0.0}, seed=1)
        assert not any(d.arrival_drop(n, "x", self.pkt(1, p, 0), 0) for n in (0, 1) for p in range(1000))

    def test_seeds_differ(self):
        pk = [self.pkt(1, p, 0) for p in range(2000)]
        a = [BernoulliDrops({0: 0.5}, 1).arrival_drop(0, "x", p, 0) for p in pk]
        b = [BernoulliDrops({0: 0.5}, 2).arrival_drop(0, "x", p, 0) for p in pk]
        assert a != b


def first_pass_drops(lines, below):
    out = set()
    for line in lines:
        f = dict(tok.split("=", 1) for tok in line.split())
        if f["ev"] == "drop" and f["detail"] == "original" and int(f["pid"]) < below:
            out.add((f["node"], int(f["pid"])))
    return out


class TestRuns:
    def test_lossless_line(self):
        m = sim.run_scenario(line_spec(), 1)
        assert m.flows[35].delivered_fraction[-1] == 1.0
        assert m.diameter_histogram == {}
        assert m.totals["e2e_retx"] == 0

    def test_sample_ticks(self):
        m = sim.run_scenario(line_spec(duration=3, sample_interval_s=0.5), 1)
        assert m.sample_times_s == [0.5 * k for k in range(1, 7)]
        assert all(len(getattr(m.flows[35], name)) == 6 for name in ("throughput_bps", "delivered", "headend_loss"))

    def test_throughput_matches_rate_when_lossless(self):
        m = sim.run_scenario(line_spec(duration=4, rate=1e6), 1)
        assert m.flows[35].throughput_bps[2] == pytest.approx(1e6, rel=0.01)

    def test_deterministic(self):
        spec = line_spec(drop=DropSpec("bernoulli", (0.02, 0.02)), duration=3)
        a, b = sim.run_scenario(spec, 5), sim.run_scenario(spec, 5)
        assert a == b
        assert a.recoveries > 0

    def test_common_random_numbers_across_modes(self):
        spec = line_spec(drop=DropSpec("bernoulli", (0.02, 0.02)), duration=2)
        gos = sim.simulate(spec, 3, trace=True)
        e2e = sim.simulate(replace(spec, gos_enabled=False), 3, trace=True)
        # the E-E head end may be window limited, so compare packets both runs emitted
        both = min(gos.engine.flows[35].emitted, e2e.engine.flows[35].emitted)
        a, b = first_pass_drops(gos.trace, both), first_pass_drops(e2e.trace, both)
        assert a and a == b

    def test_forced_drop_single_recovery(self):
        spec = line_spec(n=5, duration=0.05, forced_drops=(("X4", 35, 5),))
        run = sim.simulate(spec, 1, check_conservation=True)
        assert run.metrics.diameter_histogram == {1: 1}
        assert run.metrics.totals["e2e_retx"] == 0
        assert run.metrics.conservation_holds()

    def test_without_gos_head_end_repairs(self):
        spec = line_spec(n=5, duration=0.5, sample_interval_s=0.1, gos_enabled=False,
                         forced_drops=(("X4", 35, 5),))
        m = sim.run_scenario(spec, 1)
        assert m.recoveries == 0
        assert m.totals["e2e_retx"] >= 1
        assert m.flows[35].delivered_fraction[-1] == 1.0

    @pytest.mark.parametrize("gos_enabled", [True, False])
    def test_conservation_under_loss(self, gos_enabled):
        spec = line_spec(drop=DropSpec("bernoulli", (0.03, 0.03)), duration=3, sample_interval_s=0.1,
                         gos_enabled=gos_enabled)
        m = sim.run_scenario(spec, 2, check_conservation=True)
        assert len(m.conservation) == 30
        bad = [s for s in m.conservation if not s.holds]
        assert not bad, bad[:3]

    def test_queue_mode_drops_at_tail(self):
        t = line_topology(4, 1000, capacity_bps=1_000_000)
        flows = (FlowSpec(35, "X1", "X4", 4e6, window=64), FlowSpec(36, "X1", "X4", 2e6, window=64))
        spec = ScenarioSpec(t, flows, gos_nodes=("X1", "X2", "X3", "X4"), drop=DropSpec("queue", cap=4),
                            duration_s=2)
        m = sim.run_scenario(spec, 1, check_conservation=True)
        assert m.totals["drops"] > 0
        assert m.aggregate("throughput_bps")[-1] <= 1_000_000 * 1.01
        assert m.conservation_holds()

    def test_poisson_arrivals_deterministic(self):
        spec = line_spec(arrival="poisson", duration=1)
        assert sim.run_scenario(spec, 3) == sim.run_scenario(spec, 3)
        assert sim.run_scenario(spec, 3) != sim.run_scenario(spec, 4)

    def test_paired_lossless_deltas_zero(self):
        rep = sim.compare_gos_vs_e2e(line_spec(duration=2), [1, 2])
        assert rep.mean_throughput_delta == 0
        assert rep.mean_loss_delta == 0
        assert all(v == 0 for s in rep.seeds for v in s.delivered_delta)


class TestSpacing:
    @pytest.mark.parametrize("k, expect", [(1, list(range(9))), (2, [0, 2, 4, 6, 8]), (4, [0, 4, 8]), (8, [0, 8])])
    def test_positions(self, k, expect):
        assert sim.spacing_positions(9, k) == expect

    @pytest.mark.parametrize("k", [0, 9, 12])
    def test_out_of_range(self, k):
        with pytest.raises(ValueError):
            sim.spacing_positions(9, k)

    def test_one_hop_recovery_spans_k_links(self):
        t = line_topology(9, 1000)
        for k in (2, 4):
            spec = sim.diameter_spacing_scenario(t, t.route(LINE9), k, duration_s=2,
                                                 drop=DropSpec("bernoulli", (0.01, 0.01), "all"))
            assert spec.gos_nodes == tuple(LINE9[p] for p in sim.spacing_positions(9, k))
            run = sim.simulate(spec, 1)
            # a drop at a GoS node repairs from the previous GoS node, k links up the path
            ones = [r for r in run.engine.records
                    if r.outcome.name == "RECOVERED" and r.cause == "drop" and r.diameter == 1]
            assert ones
            assert all(LINE9.index(r.node) - LINE9.index(r.found_by) == k for r in ones)


class TestRandomFlows:
    def test_min_gos(self):
        t = generate_att_like(1)
        gos = place_gos_nodes(t, 8)
        flows = sim.random_flows(t, gos, 6, random.Random(2), min_gos_hops=2)
        assert len({(f.src, f.dst) for f in flows}) == 6
        for f in flows:
            route = sim.shortest_delay_path(t, f.src, f.dst)
            assert sum(n in gos for n in route.nodes) >= 2
            assert sim.RATE_RANGE_BPS[0] <= f.rate_bps <= sim.RATE_RANGE_BPS[1]

    def test_impossible(self):
        t = line_topology(3)
        with pytest.raises(ScenarioError):
            sim.random_flows(t, [], 1, random.Random(1), min_gos_hops=1, max_tries=50)


GOOD = """\
# two flows on a line
topology line nodes=6 delay_us=500
gos_nodes spacing 2
flow fec=35 src=X1 dst=X6 rate_bps=1e6
flow fec=36 src=X6 dst=X1 rate_bps=64000 level=3 window=8
drop bernoulli rate=0.01..0.02 nodes=lsr
duration_s 5
gos on
"""


class TestScenarioParser:
    def test_good(self):
        spec = parse_scenario(GOOD)
        assert spec.gos_nodes == ("X1", "X3", "X5")
        assert [f.fec for f in spec.flows] == [35, 36]
        assert spec.flows[1].window == 8 and spec.flows[1].level == 3
        assert spec.drop == DropSpec("bernoulli", (0.01, 0.02), "lsr")
        assert spec.duration_s == 5

    @pytest.mark.parametrize("line, pattern", [
        ("flow fec=37 src=X1 dst=X9 rate_bps=1e6", r"s\.scn:9: flows\[2\]\.dst: unknown node 'X9'"),
        ("flow fec=37 src=X1 dst=X6 rate_bps=9e9", r"s\.scn:9: flows\[2\]\.rate_bps"),
        ("flow fec=37 src=X1 dst=X6 rate_bps=fast", r"s\.scn:9: flows\[2\]\.rate_bps: 'fast' is not a number"),
        ("flow fec=37 src=X1 rate_bps=1e6", r"s\.scn:9: flows\[2\]\.dst: required"),
        ("flow fec=35 src=X1 dst=X6 rate_bps=1e6", r"s\.scn:9: flows\[2\]\.fec: duplicate FEC 35"),
        ("frobnicate 3", r"s\.scn:9: unknown directive 'frobnicate'"),
        ("drop bernoulli rate=0.5..0.1", r"drop\.rate"),
        ("duration_s -1", r"duration_s: must be positive"),
        ("gos maybe", r"s\.scn:9: gos: expected on or off"),
    ])
    def test_errors_are_located(self, line, pattern):
        with pytest.raises(ScenarioError) as ei:
            parse_scenario(GOOD + line + "\n", source="s.scn")
        assert any(re.search(pattern, e) for e in ei.value.errors), ei.value.errors

    def test_collects_several_errors(self):
        text = "topology line nodes=3\nflow fec=1 src=X1 dst=X3 rate_bps=1\nbogus\n"
        with pytest.raises(ScenarioError) as ei:
            parse_scenario(text, source="m")
        msgs = ei.value.errors
        assert any(m.startswith("m:3:") for m in msgs)

    def test_missing_topology(self):
        with pytest.raises(ScenarioError, match="topology: missing"):
            parse_scenario("duration_s 3\n", source="m")

    def test_missing_topology_file(self, tmp_path):
        with pytest.raises(ScenarioError, match=r"m:1: topology: cannot read .*nope\.topo"):
            parse_scenario("topology file nope.topo\n", tmp_path, "m")

    def test_load_missing(self, tmp_path):
        p = tmp_path / "absent.scn"
        with pytest.raises(ScenarioError, match="absent.scn"):
            sim.load_scenario(p)

    def test_unknown_gos_node(self):
        with pytest.raises(ScenarioError, match=r"m:2: gos_nodes\[1\]: unknown node 'Q'"):
            parse_scenario("topology line nodes=3\ngos_nodes list X1 Q\nflow fec=1 src=X1 dst=X3 rate_bps=1e5\n",
                           source="m")

    def test_random_flows_directive(self):
        spec = parse_scenario("topology generate att_like seed=1\ngos_nodes top_degree 8\n"
                              "flows random count=5 seed=3 min_gos=2\n")
        assert len(spec.flows) == 5 and len(spec.gos_nodes) == 8

    def test_comment_and_quotes(self):
        spec = parse_scenario("topology line nodes=3  # trailing\n\n   \nflow fec=1 src=X1 dst=X3 rate_bps=1e5\n")
        assert spec.flows[0].src == "X1"


def test_trend_fit():
    tr = sim.fit_trend([0, 1, 2, 3], [1, 3, 5, 7])
    assert tr.slope == pytest.approx(2) and tr.intercept == pytest.approx(1)
    assert sim.fit_trend([1], [4]).intercept == 4


def test_force_drop_directive():
    text = "topology line nodes=4\ngos_nodes all\nflow fec=9 src=X1 dst=X4 rate_bps=1e5\nforce_drop X3 9 2\n"
    assert parse_scenario(text).forced_drops == (("X3", 9, 2),)
    with pytest.raises(ScenarioError, match=r"m:4: force_drop: expected NODE FEC PID"):
        parse_scenario(text.replace("X3 9 2", "X3 9"), source="m")
    with pytest.raises(ScenarioError, match=r"forced_drops\[0\]: unknown node 'Q'"):
        parse_scenario(text.replace("X3 9 2", "Q 9 2"), source="m")
