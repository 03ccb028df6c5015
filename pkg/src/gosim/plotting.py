"""PNG figures for run, comparison and curve outputs (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .analytics import CurvePoint
from .simulation import ComparisonReport, MetricsSeries


def _save(fig: Figure, path: Path) -> Path:
    FigureCanvasAgg(fig)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    return path


def _series_plot(path: Path, times, columns: dict[str, list[float]], ylabel: str, title: str) -> Path:
    fig = Figure(figsize=(7, 4))
    ax = fig.add_subplot()
    for name, ys in columns.items():
        ax.plot(times, ys, label=name, linewidth=1.2 if name == "all" else 0.8)
    ax.set_xlabel("time (s)")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if len(columns) <= 12:
        ax.legend(fontsize="small")
    return _save(fig, path)


def plot_run(m: MetricsSeries, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    t = m.sample_times_s
    thr = {f"fec {fec}": s.throughput_bps for fec, s in m.flows.items()}
    thr["all"] = m.aggregate("throughput_bps")
    dlv = {f"fec {fec}": s.delivered_fraction for fec, s in m.flows.items()}
    dlv["all"] = m.aggregate_delivered_fraction()
    loss = {f"fec {fec}": s.headend_loss for fec, s in m.flows.items()}
    loss["all"] = m.aggregate_headend_loss()
    paths = [
        _series_plot(out / "throughput.png", t, thr, "throughput (bps)", "Delivered throughput per sample"),
        _series_plot(out / "delivered.png", t, dlv, "delivered fraction", "Delivered fraction of planned packets"),
        _series_plot(out / "loss.png", t, loss, "head-end loss fraction", "Loss seen by the head-end"),
    ]
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    ds = sorted(m.diameter_histogram)
    ax.bar([str(d) for d in ds], [m.diameter_histogram[d] for d in ds])
    ax.set_xlabel("recovery diameter (GoSP hops)")
    ax.set_ylabel("recoveries")
    ax.set_title("Recovery diameters")
    paths.append(_save(fig, out / "diameters.png"))
    return paths


def plot_comparison(r: ComparisonReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    t = r.sample_times_s
    paths = []
    for name, (g, e), (tg, te), ylabel in (
        ("compare_throughput.png", (r.gos_throughput, r.e2e_throughput), r.throughput_trend, "throughput (bps)"),
        ("compare_loss.png", (r.gos_loss, r.e2e_loss), r.loss_trend, "head-end loss fraction"),
    ):
        fig = Figure(figsize=(7, 4))
        ax = fig.add_subplot()
        ax.plot(t, g, label="GoS", linewidth=0.8)
        ax.plot(t, e, label="E-E", linewidth=0.8)
        ax.plot(t, tg(t), "--", label="GoS trend")
        ax.plot(t, te(t), "--", label="E-E trend")
        ax.set_xlabel("time (s)")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        ax.legend(fontsize="small")
        paths.append(_save(fig, out / name))
    return paths


def plot_curve(points: list[CurvePoint], path: str | Path) -> Path:
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    ns = [p.n for p in points]
    ax.plot(ns, [p.max_d for p in points], label="max feasible d")
    ax.plot(ns, [float(p.bound) for p in points], ":", label="raw bound")
    ax.set_xlabel("LSP size (nodes)")
    ax.set_ylabel("GoSP diameter")
    ax.grid(alpha=0.3)
    ax.legend(fontsize="small")
    return _save(fig, Path(path))
