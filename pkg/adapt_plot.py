"""Self-contained SVG line plots for trajectories and mean comparisons."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from collections.abc import Sequence
from pathlib import Path
from typing import Optional

import numpy as np

WIDTH, HEIGHT = 900, 540
MARGIN = 0.05
# axis labels and ticks need room beyond the 5% data margin
PAD_LEFT, PAD_BOTTOM, PAD_TOP, PAD_RIGHT = 70, 50, 40, 20
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def _extent(values: np.ndarray) -> tuple[float, float]:
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    pad = MARGIN * (hi - lo)
    return lo - pad, hi + pad


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def line_plot_svg(
    times: Sequence[float],
    series: np.ndarray,
    title: str,
    xlabel: str = "t",
    ylabel: str = "state",
    markers: Optional[np.ndarray] = None,
) -> str:
    """
    One polyline per column of ``series`` (shape T x agents) against
    ``times``; ``markers`` of the same shape are drawn as small squares.
    """
    times = np.asarray(times, dtype=float)
    series = np.asarray(series, dtype=float)
    if series.ndim != 2 or series.shape[0] != times.size:
        raise ValueError(f"Series of shape {series.shape} does not match {times.size} time points")
    stacked = series if markers is None else np.vstack([series, np.asarray(markers, dtype=float)])
    x_lo, x_hi = _extent(times)
    y_lo, y_hi = _extent(stacked)
    plot_w = WIDTH - PAD_LEFT - PAD_RIGHT
    plot_h = HEIGHT - PAD_TOP - PAD_BOTTOM

    def sx(x):
        return PAD_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y):
        return PAD_TOP + (y_hi - y) / (y_hi - y_lo) * plot_h

    svg = ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg",
        "width": str(WIDTH), "height": str(HEIGHT),
        "viewBox": f"0 0 {WIDTH} {HEIGHT}",
    })
    ET.SubElement(svg, "rect", {"x": "0", "y": "0", "width": str(WIDTH), "height": str(HEIGHT), "fill": "white"})
    heading = ET.SubElement(svg, "text", {"x": str(WIDTH // 2), "y": "24", "text-anchor": "middle", "font-size": "16"})
    heading.text = title

    axes = ET.SubElement(svg, "g", {"stroke": "black", "stroke-width": "1"})
    ET.SubElement(axes, "line", {"x1": str(PAD_LEFT), "y1": str(HEIGHT - PAD_BOTTOM),
                                 "x2": str(WIDTH - PAD_RIGHT), "y2": str(HEIGHT - PAD_BOTTOM)})
    ET.SubElement(axes, "line", {"x1": str(PAD_LEFT), "y1": str(PAD_TOP),
                                 "x2": str(PAD_LEFT), "y2": str(HEIGHT - PAD_BOTTOM)})
    ticks = ET.SubElement(svg, "g", {"font-size": "11", "fill": "black"})
    for x in np.linspace(times.min(), times.max(), 6):
        label = ET.SubElement(ticks, "text", {"x": _fmt(sx(x)), "y": str(HEIGHT - PAD_BOTTOM + 16), "text-anchor": "middle"})
        label.text = f"{x:g}"
    for y in np.linspace(stacked.min(), stacked.max(), 6):
        label = ET.SubElement(ticks, "text", {"x": str(PAD_LEFT - 6), "y": _fmt(sy(y) + 4), "text-anchor": "end"})
        label.text = f"{y:.3g}"
    xlab = ET.SubElement(svg, "text", {"x": str(PAD_LEFT + plot_w // 2), "y": str(HEIGHT - 10), "text-anchor": "middle",
                                       "font-size": "13"})
    xlab.text = xlabel
    ylab = ET.SubElement(svg, "text", {"x": "18", "y": str(PAD_TOP + plot_h // 2), "text-anchor": "middle",
                                       "font-size": "13", "transform": f"rotate(-90 18 {PAD_TOP + plot_h // 2})"})
    ylab.text = ylabel

    lines = ET.SubElement(svg, "g", {"fill": "none", "stroke-width": "1.5"})
    for agent in range(series.shape[1]):
        points = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(times, series[:, agent]))
        ET.SubElement(lines, "polyline", {"points": points, "stroke": PALETTE[agent % len(PALETTE)],
                                          "data-agent": str(agent)})
    if markers is not None:
        markers = np.asarray(markers, dtype=float)
        squares = ET.SubElement(svg, "g", {"stroke": "none"})
        for agent in range(markers.shape[1]):
            colour = PALETTE[agent % len(PALETTE)]
            for x, y in zip(times, markers[:, agent]):
                ET.SubElement(squares, "rect", {"x": _fmt(sx(x) - 2), "y": _fmt(sy(y) - 2), "width": "4", "height": "4",
                                                "fill": colour, "data-agent": str(agent)})

    ET.indent(svg)
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(svg, encoding="unicode") + "\n"


def write_svg(path: str | Path, document: str) -> Path:
    path = Path(path)
    path.write_text(document, encoding="utf-8", newline="\n")
    return path
