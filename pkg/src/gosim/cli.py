"""``gosim`` command line.

Exit status: 0 on success, 2 for invalid input (bad arguments, scenario or
parameter validation failures), 1 for internal errors and failed self-checks.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import random
import sys
from fractions import Fraction
from importlib import resources
from pathlib import Path

from . import analytics, codec
from .simulation import ScenarioError, compare_gos_vs_e2e, load_scenario, simulate
from .topology import generate_att_like, place_gos_nodes, serialize_topology

log = logging.getLogger("gosim")

RUN_COLUMNS = """\
run output files (in --out):
  throughput.csv  time_s, fec_<id>..., all   delivered bits per second in each sample interval
  delivered.csv   time_s, fec_<id>..., all   delivered fraction of the flow's planned packets
  loss.csv        time_s, fec_<id>..., all   head-end retransmissions / packets emitted so far
  diameters.csv   diameter, count            locally recovered losses by GoSP diameter
  summary.txt     totals and recovery histogram
  trace.txt       event trace, only with GOS_SIM_TRACE=1
  *.png           figures of the above, unless --no-plot
"""

COMPARE_COLUMNS = """\
compare output files (in --out):
  compare.csv  seed, gos_throughput_bps, e2e_throughput_bps, throughput_delta_bps,
               gos_loss, e2e_loss, loss_delta
  series.csv   time_s, gos_throughput_bps, e2e_throughput_bps, gos_loss, e2e_loss,
               gos_throughput_trend, e2e_throughput_trend, gos_loss_trend, e2e_loss_trend
  summary.txt  mean deltas and trend-line gaps
"""

CURVE_COLUMNS = "curve CSV columns: n, bound (raw diameter bound), max_d (largest feasible diameter)\n"


class UsageError(Exception):
    pass


def _num(x) -> str:
    """CSV cell; refuses to write NaN or infinity."""
    if isinstance(x, Fraction):
        x = float(x)
    if isinstance(x, float):
        if not math.isfinite(x):
            raise ValueError("refusing to write a non-finite value")
        return f"{x:.10g}"
    return str(x)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) for v in row])


def _wide(path: Path, times, per_flow: dict[int, list[float]], total: list[float]) -> None:
    fecs = sorted(per_flow)
    rows = ([t] + [per_flow[f][k] for f in fecs] + [total[k]] for k, t in enumerate(times))
    _write_csv(path, ["time_s"] + [f"fec_{f}" for f in fecs] + ["all"], rows)


# -- subcommands ----------------------------------------------------------------------

def cmd_run(args) -> int:
    spec = load_scenario(args.scenario)
    tracing = os.environ.get("GOS_SIM_TRACE") == "1"
    result = simulate(spec, args.seed, trace=tracing, check_conservation=args.check_conservation)
    m = result.metrics
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    times = m.sample_times_s
    _wide(out / "throughput.csv", times, {f: s.throughput_bps for f, s in m.flows.items()},
          m.aggregate("throughput_bps"))
    _wide(out / "delivered.csv", times, {f: s.delivered_fraction for f, s in m.flows.items()},
          m.aggregate_delivered_fraction())
    _wide(out / "loss.csv", times, {f: s.headend_loss for f, s in m.flows.items()}, m.aggregate_headend_loss())
    _write_csv(out / "diameters.csv", ["diameter", "count"], sorted(m.diameter_histogram.items()))
    lines = [f"scenario {args.scenario}", f"seed {args.seed}"]
    lines += [f"{k} {v}" for k, v in m.totals.items()]
    lines.append(f"recoveries {m.recoveries}")
    for d, c in m.diameter_histogram.items():
        lines.append(f"diameter {d} {c}")
    if m.recovery_latencies_us:
        lat = sorted(m.recovery_latencies_us)
        lines.append(f"recovery_latency_us min={lat[0]} median={lat[len(lat) // 2]} max={lat[-1]}")
    if args.check_conservation:
        lines.append(f"conservation {'ok' if m.conservation_holds() else 'VIOLATED'}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    if tracing:
        (out / "trace.txt").write_text("\n".join(result.trace) + "\n")
    if not args.no_plot:
        from .plotting import plot_run
        plot_run(m, out)
    print(f"wrote {out}")
    return 0


def cmd_compare(args) -> int:
    spec = load_scenario(args.scenario)
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    rep = compare_gos_vs_e2e(spec, range(args.first_seed, args.first_seed + args.seeds), workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "compare.csv",
               ["seed", "gos_throughput_bps", "e2e_throughput_bps", "throughput_delta_bps",
                "gos_loss", "e2e_loss", "loss_delta"],
               ([s.seed, s.gos_throughput_bps, s.e2e_throughput_bps, s.throughput_delta,
                 s.gos_loss, s.e2e_loss, s.loss_delta] for s in rep.seeds))
    t = rep.sample_times_s
    gt, et = rep.throughput_trend
    gl, el = rep.loss_trend
    cols = [t, rep.gos_throughput, rep.e2e_throughput, rep.gos_loss, rep.e2e_loss,
            list(map(float, gt(t))), list(map(float, et(t))), list(map(float, gl(t))), list(map(float, el(t)))]
    _write_csv(out / "series.csv",
               ["time_s", "gos_throughput_bps", "e2e_throughput_bps", "gos_loss", "e2e_loss",
                "gos_throughput_trend", "e2e_throughput_trend", "gos_loss_trend", "e2e_loss_trend"],
               zip(*cols))
    wins = sum(s.throughput_delta > 0 for s in rep.seeds)
    fewer = sum(s.loss_delta < 0 for s in rep.seeds)
    (out / "summary.txt").write_text("\n".join([
        f"seeds {len(rep.seeds)}",
        f"mean_throughput_delta_bps {rep.mean_throughput_delta:.6g}",
        f"mean_loss_delta {rep.mean_loss_delta:.6g}",
        f"throughput_trend_gap_percent {rep.trend_gap_percent():.4f}",
        f"loss_trend_gap_points {rep.loss_trend_gap_points():.4f}",
        f"seeds_gos_more_throughput {wins}",
        f"seeds_gos_less_loss {fewer}",
    ]) + "\n")
    if not args.no_plot:
        from .plotting import plot_comparison
        plot_comparison(rep, out)
    print(f"wrote {out}")
    return 0


def _parse_n(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition("..")
    try:
        return (int(lo), int(hi)) if sep else (int(lo), int(lo))
    except ValueError:
        raise UsageError(f"--n expects N or A..B, got {text!r}") from None


def cmd_curve(args) -> int:
    n_min, n_max = args.n_min, args.n_max
    if args.n is not None:
        n_min, n_max = _parse_n(args.n)
    if n_min is None or n_max is None:
        raise UsageError("give --n A..B or both --n-min and --n-max")
    if not args.i + 2 <= n_min <= n_max:
        raise UsageError(f"need i + 2 <= n-min <= n-max, got i={args.i} range {n_min}..{n_max}")
    points = analytics.scalability_curve(range(n_min, n_max + 1), args.i, args.d_gos)
    rows = [(p.n, p.bound, p.max_d) for p in points]
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_csv(out, ["n", "bound", "max_d"], rows)
        if not args.no_plot:
            from .plotting import plot_curve
            plot_curve(points, out.with_suffix(".png"))
        print(f"wrote {out}")
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["n", "bound", "max_d"])
        w.writerows([_num(v) for v in r] for r in rows)
    return 0


def cmd_bound(args) -> int:
    bound, max_d = analytics.max_diameter_bound(args.n, args.i, args.d_gos)
    print(f"bound {float(bound):.10g}")
    print(f"max_d {max_d}")
    if args.delays:
        try:
            delays = [int(x) for x in args.delays.split(",")]
        except ValueError:
            raise UsageError(f"--delays expects comma-separated integers, got {args.delays!r}") from None
        p = analytics.AnalyticsParams(args.d_gos)
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["model", "ddt", "retx", "total"])
        w.writerow(["e2e"] + [_num(v) for v in analytics.total_e2e(delays).as_row()])
        if args.d is not None:
            w.writerow([f"gos_d{args.d}"] + [_num(v) for v in analytics.total_gos(delays, args.d, p).as_row()])
    return 0


def _golden_vectors(directory: str | None) -> dict[str, str]:
    if directory:
        return {p.stem: p.read_text() for p in sorted(Path(directory).glob("*.hex"))}
    base = resources.files("gosim") / "testdata"
    return {name: (base / f"{name}.hex").read_text() for name in codec.GOLDEN}


def cmd_codec_check(args) -> int:
    failures = 0
    for name, text in _golden_vectors(args.golden_dir).items():
        expected = codec.GOLDEN.get(name)
        if expected is None:
            print(f"golden {name}: no reference message", file=sys.stderr)
            failures += 1
            continue
        data = codec.read_hex(text)
        want = codec.encode(expected)
        try:
            ok = data == want and codec.decode(data) == expected
        except codec.CodecError as exc:
            ok = False
            print(f"golden {name}: decode failed: {exc}", file=sys.stderr)
        if not ok:
            failures += 1
            print(f"golden {name}: mismatch\nfile:\n{codec.hexdump(data)}\nexpected:\n{codec.hexdump(want)}",
                  file=sys.stderr)
    if failures:
        return 1
    rng = random.Random(args.seed)
    for k in range(args.count):
        msg = codec.random_message(rng)
        raw = codec.encode(msg)
        try:
            back = codec.decode(raw)
        except codec.CodecError as exc:
            back = exc
        if back != msg:
            print(f"message {k}: round trip failed for {msg!r} -> {back!r}\n{codec.hexdump(raw)}",
                  file=sys.stderr)
            return 1
    print(f"codec ok: {len(codec.GOLDEN)} golden vectors, {args.count} random round trips")
    return 0


def cmd_gen_topology(args) -> int:
    t = generate_att_like(args.seed)
    if args.gos_top:
        t = t.with_gos(place_gos_nodes(t, args.gos_top), args.buffer_bytes)
    text = serialize_topology(t)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# -- argument parsing --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gosim", description=__doc__.splitlines()[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog="Set GOS_SIM_TRACE=1 to dump a per-event trace from 'run'.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    raw = argparse.RawDescriptionHelpFormatter

    r = sub.add_parser("run", help="simulate one scenario", epilog=RUN_COLUMNS, formatter_class=raw)
    r.add_argument("--scenario", required=True)
    r.add_argument("--seed", type=int, default=1)
    r.add_argument("--out", default="out")
    r.add_argument("--no-plot", action="store_true", help="skip PNG figures")
    r.add_argument("--check-conservation", action="store_true", help="audit packet conservation at every sample")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="paired GoS vs end-to-end runs", epilog=COMPARE_COLUMNS, formatter_class=raw)
    c.add_argument("--scenario", required=True)
    c.add_argument("--seeds", type=int, default=10, help="number of seeds")
    c.add_argument("--first-seed", type=int, default=1)
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--out", default="out")
    c.add_argument("--no-plot", action="store_true")
    c.set_defaults(func=cmd_compare)

    cu = sub.add_parser("curve", help="diameter scalability curve", epilog=CURVE_COLUMNS, formatter_class=raw)
    cu.add_argument("--n", help="LSP size N or range A..B")
    cu.add_argument("--n-min", type=int)
    cu.add_argument("--n-max", type=int)
    cu.add_argument("--i", type=int, default=0)
    cu.add_argument("--d-gos", default="1", help="GoS delay factor, exact decimal or fraction")
    cu.add_argument("--out", help="CSV path (default: stdout)")
    cu.add_argument("--no-plot", action="store_true")
    cu.set_defaults(func=cmd_curve)

    b = sub.add_parser("bound", help="diameter bound for one LSP size, optional delay report")
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--i", type=int, default=0)
    b.add_argument("--d-gos", default="1")
    b.add_argument("--delays", help="comma-separated link delays (us) for a ddt/retx/total report")
    b.add_argument("--d", type=int, help="diameter for the GoS row of the report")
    b.set_defaults(func=cmd_bound)

    k = sub.add_parser("codec-check", help="golden vectors plus random round trips")
    k.add_argument("--count", type=int, default=10000)
    k.add_argument("--seed", type=int, default=1)
    k.add_argument("--golden-dir", help="directory of <name>.hex vectors (default: shipped set)")
    k.set_defaults(func=cmd_codec_check)

    g = sub.add_parser("gen-topology", help="write a generated AT&T-like topology file")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--gos-top", type=int, default=0, help="mark the K highest-degree nodes GoS-capable")
    g.add_argument("--buffer-bytes", type=int, default=4_000_000)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_topology)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if hasattr(args, "d_gos"):
        try:
            args.d_gos = Fraction(args.d_gos)
        except (ValueError, ZeroDivisionError):
            print(f"error: --d-gos {args.d_gos!r} is not a number", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except ScenarioError as exc:
        for line in exc.errors:
            print(f"error: {line}", file=sys.stderr)
        return 2
    except (UsageError, analytics.AnalyticsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        log.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
