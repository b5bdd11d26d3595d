"""
Figures Module
Builds the report figures as plotly Figures and renders them to standalone, byte-stable SVG
"""

import calendar
import os
from typing import List, Mapping, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np
import plotly.graph_objects as go

from eval_stats import MonthlyReport
from logger_config import get_logger

logger = get_logger("Figures")

WIDTH, HEIGHT = 760, 440
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 70, 150, 50, 60
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")
BAND_Z = 1.96


def month_band_figure(monthly: MonthlyReport, title: str, units: str = "") -> go.Figure:
    """Mean prediction per month with a shaded +-1.96 sigma band and the observed monthly mean"""
    months = [m.month for m in monthly.months]
    mean = np.array([m.mean_pred for m in monthly.months], dtype=float)
    sigma = np.sqrt(np.array([m.mean_var if m.mean_var is not None else 0.0 for m in monthly.months]))
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=months, y=(mean + BAND_Z * sigma).tolist(), mode="lines",
                             line=dict(width=0, color=PALETTE[0]), showlegend=False, name="upper"))
    fig.add_trace(go.Scatter(x=months, y=(mean - BAND_Z * sigma).tolist(), mode="lines",
                             line=dict(width=0, color=PALETTE[0]), fill="tonexty",
                             fillcolor="rgba(31,119,180,0.25)", name="±1.96σ"))
    fig.add_trace(go.Scatter(x=months, y=mean.tolist(), mode="lines+markers",
                             line=dict(width=2, color=PALETTE[0]), name="mean prediction"))
    fig.add_trace(go.Scatter(x=months, y=[m.mean_target for m in monthly.months], mode="markers",
                             marker=dict(color=PALETTE[1], size=6), name="observed mean"))
    fig.update_layout(
        title=dict(text=title),
        xaxis=dict(title=dict(text="month"), range=[0.5, 12.5], tickvals=list(range(1, 13)),
                   ticktext=[calendar.month_abbr[m] for m in range(1, 13)]),
        yaxis=dict(title=dict(text=units)),
    )
    return fig


def duration_histogram_figure(durations_min: Mapping[str, Sequence[float]], bins: int = 30) -> go.Figure:
    """Trip-duration histograms (minutes) per vehicle type on shared bin edges"""
    everything = np.concatenate([np.asarray(v, dtype=float) for v in durations_min.values()]) \
        if durations_min else np.zeros(0)
    edges = np.histogram_bin_edges(everything if everything.size else np.zeros(1), bins=bins)
    centers = (edges[:-1] + edges[1:]) / 2
    width = float(edges[1] - edges[0]) if len(edges) > 1 else 1.0
    fig = go.Figure()
    for i, (vehicle_type, values) in enumerate(sorted(durations_min.items())):
        counts, _ = np.histogram(np.asarray(values, dtype=float), bins=edges)
        fig.add_trace(go.Bar(x=centers.tolist(), y=counts.tolist(), width=width, name=vehicle_type,
                             marker=dict(color=PALETTE[i % len(PALETTE)]), opacity=0.6))
    fig.update_layout(title=dict(text="Trip duration per vehicle type"), barmode="overlay",
                      xaxis=dict(title=dict(text="duration [min]")), yaxis=dict(title=dict(text="trips")))
    return fig


def cluster_scatter_figure(od_points: np.ndarray, labels: Sequence[int], centroids: np.ndarray) -> go.Figure:
    """Trip origins colored by OD cluster, with cluster origin centroids"""
    od_points = np.asarray(od_points, dtype=float).reshape(-1, 4)
    labels = np.asarray(labels, dtype=int)
    fig = go.Figure()
    for cluster in range(len(centroids)):
        members = od_points[labels == cluster]
        fig.add_trace(go.Scatter(x=members[:, 1].tolist(), y=members[:, 0].tolist(), mode="markers",
                                 marker=dict(color=PALETTE[cluster % len(PALETTE)], size=3),
                                 name=f"cluster {cluster}"))
    fig.add_trace(go.Scatter(x=np.asarray(centroids)[:, 1].tolist(), y=np.asarray(centroids)[:, 0].tolist(),
                             mode="markers", marker=dict(color="#000000", size=8), name="centroid"))
    fig.update_layout(title=dict(text="Origin clusters"), xaxis=dict(title=dict(text="longitude [deg]")),
                      yaxis=dict(title=dict(text="latitude [deg]")))
    return fig


def _numbers(values) -> np.ndarray:
    if values is None:
        return np.zeros(0)
    return np.asarray(list(values), dtype=float)


def _axis_range(axis, values: List[np.ndarray], pad: float) -> Tuple[float, float]:
    if axis.range is not None:
        return float(axis.range[0]), float(axis.range[1])
    finite = [v[np.isfinite(v)] for v in values if v.size]
    stacked = np.concatenate(finite) if finite else np.zeros(0)
    if stacked.size == 0:
        return 0.0, 1.0
    low, high = float(stacked.min()), float(stacked.max())
    if high == low:
        low, high = low - 0.5, high + 0.5
    span = high - low
    return low - pad * span, high + pad * span


def _trace_color(trace, index: int) -> str:
    line = getattr(trace, "line", None)
    for candidate in (getattr(line, "color", None) if line is not None else None, trace.marker.color):
        if isinstance(candidate, str):
            return candidate
    return PALETTE[index % len(PALETTE)]


def _ticks(axis, low: float, high: float) -> List[Tuple[float, str]]:
    if axis.tickvals is not None:
        texts = list(axis.ticktext) if axis.ticktext is not None else [f"{v:g}" for v in axis.tickvals]
        return [(float(v), str(t)) for v, t in zip(axis.tickvals, texts)]
    return [(float(v), f"{v:.4g}") for v in np.linspace(low, high, 6)]


def figure_to_svg(fig: go.Figure, width: int = WIDTH, height: int = HEIGHT) -> str:
    """
    Render scatter (lines, markers, tonexty fills) and bar traces to SVG

    Coordinates are printed with two decimals so identical figures give identical bytes.
    """
    layout = fig.layout
    xs = [_numbers(t.x) for t in fig.data]
    ys = [_numbers(t.y) for t in fig.data]
    has_bars = any(t.type == "bar" for t in fig.data)
    x_low, x_high = _axis_range(layout.xaxis, xs, 0.03)
    y_low, y_high = _axis_range(layout.yaxis, ys + ([np.zeros(1)] if has_bars else []), 0.05)
    plot_w = width - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = height - MARGIN_TOP - MARGIN_BOTTOM

    def px(x: float) -> float:
        return MARGIN_LEFT + (x - x_low) / (x_high - x_low) * plot_w

    def py(y: float) -> float:
        return MARGIN_TOP + plot_h - (y - y_low) / (y_high - y_low) * plot_h

    def points(x: np.ndarray, y: np.ndarray) -> str:
        return " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y) if np.isfinite(a) and np.isfinite(b))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    title = layout.title.text
    if title:
        out.append(f'<text x="{width / 2:.2f}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>')

    for value, text in _ticks(layout.xaxis, x_low, x_high):
        if x_low <= value <= x_high:
            out.append(f'<line x1="{px(value):.2f}" y1="{MARGIN_TOP + plot_h}" x2="{px(value):.2f}" '
                       f'y2="{MARGIN_TOP + plot_h + 4}" stroke="#444444"/>')
            out.append(f'<text x="{px(value):.2f}" y="{MARGIN_TOP + plot_h + 17}" '
                       f'text-anchor="middle">{escape(text)}</text>')
    for value, text in _ticks(layout.yaxis, y_low, y_high):
        out.append(f'<line x1="{MARGIN_LEFT}" y1="{py(value):.2f}" x2="{MARGIN_LEFT + plot_w}" '
                   f'y2="{py(value):.2f}" stroke="#e5e5e5"/>')
        out.append(f'<text x="{MARGIN_LEFT - 6}" y="{py(value) + 4:.2f}" text-anchor="end">{escape(text)}</text>')

    previous: Optional[Tuple[np.ndarray, np.ndarray]] = None
    for index, (trace, x, y) in enumerate(zip(fig.data, xs, ys)):
        color = _trace_color(trace, index)
        opacity = trace.opacity if trace.opacity is not None else 1.0
        if trace.type == "bar":
            bar_w = float(trace.width) if trace.width is not None else (
                float(np.min(np.diff(x))) if x.size > 1 else 1.0)
            for a, b in zip(x, y):
                left, right = px(a - bar_w / 2), px(a + bar_w / 2)
                top, base = py(max(b, 0.0)), py(min(b, 0.0))
                out.append(f'<rect x="{left:.2f}" y="{top:.2f}" width="{right - left:.2f}" '
                           f'height="{base - top:.2f}" fill="{color}" fill-opacity="{opacity:g}"/>')
        else:
            mode = trace.mode or "lines"
            if trace.fill == "tonexty" and previous is not None:
                outline = points(x, y) + " " + points(previous[0][::-1], previous[1][::-1])
                fill = trace.fillcolor or color
                out.append(f'<polygon points="{outline}" fill="{fill}" stroke="none"/>')
            line_width = trace.line.width if trace.line.width is not None else 2
            if "lines" in mode and line_width > 0:
                out.append(f'<polyline points="{points(x, y)}" fill="none" stroke="{color}" '
                           f'stroke-width="{line_width:g}" stroke-opacity="{opacity:g}"/>')
            if "markers" in mode:
                radius = (trace.marker.size or 6) / 2
                for a, b in zip(x, y):
                    if np.isfinite(a) and np.isfinite(b):
                        out.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="{radius:g}" fill="{color}" '
                                   f'fill-opacity="{opacity:g}"/>')
        previous = (x, y)

    out.append(f'<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" '
               f'fill="none" stroke="#444444"/>')
    x_title = layout.xaxis.title.text
    y_title = layout.yaxis.title.text
    if x_title:
        out.append(f'<text x="{MARGIN_LEFT + plot_w / 2:.2f}" y="{height - 18}" '
                   f'text-anchor="middle">{escape(x_title)}</text>')
    if y_title:
        out.append(f'<text x="18" y="{MARGIN_TOP + plot_h / 2:.2f}" text-anchor="middle" '
                   f'transform="rotate(-90 18 {MARGIN_TOP + plot_h / 2:.2f})">{escape(y_title)}</text>')

    legend_y = MARGIN_TOP + 10
    for index, trace in enumerate(fig.data):
        if trace.showlegend is False or not trace.name:
            continue
        filled = getattr(trace, "fill", None) == "tonexty" and trace.fillcolor
        color = trace.fillcolor if filled else _trace_color(trace, index)
        out.append(f'<rect x="{width - MARGIN_RIGHT + 12}" y="{legend_y - 8}" width="12" height="10" fill="{color}"/>')
        out.append(f'<text x="{width - MARGIN_RIGHT + 30}" y="{legend_y}">{escape(trace.name)}</text>')
        legend_y += 18
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(fig: go.Figure, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(figure_to_svg(fig))
    logger.debug(f"Wrote figure {path}")
    return path
