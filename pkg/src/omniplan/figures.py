"""Figures for recipe reports and step timelines (rendered off-screen to files)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .reports import OK, OOM, RecipeReport
from .simulator import Timeline

CHANNEL_COLORS = {"compute": "#4c72b0", "comm": "#dd8452"}


def _new_figure(width=6.4, height=4.0) -> Figure:
    fig = Figure(figsize=(width, height), layout="constrained")
    FigureCanvasAgg(fig)
    return fig


def _series(report: RecipeReport, attr: str, status=(OK,)):
    out: dict[str, list[tuple[int, float]]] = {}
    for r in report.rows:
        v = getattr(r, attr)
        if r.status in status and v is not None:
            out.setdefault(r.method, []).append((r.seqlen, v))
    return out


def plot_metric(report: RecipeReport, attr: str, ylabel: str, path,
                hline: Optional[float] = None, status=(OK,)) -> Path:
    fig = _new_figure()
    ax = fig.add_subplot()
    for method, pts in _series(report, attr, status).items():
        xs, ys = zip(*sorted(pts))
        ax.plot(xs, ys, marker="o", label=method)
    if hline is not None:
        ax.axhline(hline, color="0.4", linestyle="--", linewidth=1, label="HBM capacity")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("sequence length (tokens)")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize="small")
    path = Path(path)
    fig.savefig(path, dpi=120)
    return path


def plot_report(report: RecipeReport, out_dir, hbm_bytes: Optional[int] = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [
        plot_metric(report, "throughput", "throughput (tokens/s/GPU)", out_dir / "throughput.png"),
        plot_metric(report, "mfu_pct", "MFU (%)", out_dir / "mfu.png"),
        plot_metric(report, "memory_gb", "predicted peak memory (GB)", out_dir / "memory.png",
                    hline=hbm_bytes / 1e9 if hbm_bytes else None, status=(OK, OOM)),
    ]


def plot_timeline(timeline: Timeline, path, device: Optional[int] = None) -> Path:
    """Gantt chart of one device's compute and comm channels."""
    device = timeline.devices[0] if device is None else device
    col = timeline.devices.index(device)
    fig = _new_figure(10, 2.6)
    ax = fig.add_subplot()
    for y, ch in enumerate(("compute", "comm")):
        iv = timeline.busy_intervals(col, ch)
        bars = [(s, e - s) for s, e in iv if e > s]
        if bars:
            ax.broken_barh(bars, (y - 0.4, 0.8), facecolors=CHANNEL_COLORS[ch])
    ax.set_yticks([0, 1], ["compute", "comm"])
    ax.set_xlabel("time (s)")
    ax.set_xlim(0, max(timeline.step_time, 1e-12))
    ax.set_title(f"device {device}, step {timeline.step_time:.4g} s", fontsize="medium")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    return path
