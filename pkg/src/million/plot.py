"""Learning curves as standalone SVG.

Each metrics CSV is one run. Columns ending in a success metric are drawn
against ``env_steps``; with several runs the curve is the across-run mean and
a band shows one standard deviation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from html import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
           "#17becf")


class CsvFormatError(ValueError):
    pass


@dataclass
class Series:
    x: np.ndarray
    mean: np.ndarray
    std: np.ndarray | None


def read_metrics(path: str) -> dict[str, np.ndarray]:
    """Columns of a metrics CSV as float arrays; blank cells become NaN."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        if "env_steps" not in header:
            raise CsvFormatError(f"{path}: row 1: missing env_steps column")
        rows = []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"{path}: row {rowno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) if v.strip() else math.nan for v in row])
            except ValueError as exc:
                raise CsvFormatError(f"{path}: row {rowno}: {exc}") from None
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    data = np.array(rows)
    return {name: data[:, i] for i, name in enumerate(header)}


def aggregate(runs: list[dict[str, np.ndarray]], column: str) -> Series | None:
    """Mean (and std across runs when there are several) of ``column`` on a shared step grid."""
    curves = []
    for run in runs:
        if column not in run:
            continue
        x, y = run["env_steps"], run[column]
        keep = ~np.isnan(y)
        if keep.any():
            curves.append((x[keep], y[keep]))
    if not curves:
        return None
    if len(curves) == 1:
        return Series(curves[0][0], curves[0][1], None)
    lo = max(c[0][0] for c in curves)
    hi = min(c[0][-1] for c in curves)
    if hi <= lo:
        grid = np.array([lo])
    else:
        grid = np.linspace(lo, hi, max(len(c[0]) for c in curves))
    ys = np.stack([np.interp(grid, cx, cy) for cx, cy in curves])
    return Series(grid, ys.mean(axis=0), ys.std(axis=0))


def default_columns(runs: list[dict[str, np.ndarray]]) -> list[str]:
    names = [k for k in runs[0] if k.startswith("eval_") and not k.endswith("_avg")]
    if not names or all(np.isnan(r[k]).all() for r in runs for k in names if k in r):
        names = [k for k in runs[0] if k.startswith("success_")]
    return names


def render_svg(series: dict[str, Series], title: str = "", width: int = 720, height: int = 420,
               ylabel: str = "trial success rate") -> str:
    left, right, top, bottom = 60, 170, 30, 45
    pw, ph = width - left - right, height - top - bottom
    xs = np.concatenate([s.x for s in series.values()]) if series else np.array([0.0, 1.0])
    x0, x1 = float(xs.min()), float(xs.max())
    if x1 <= x0:
        x1 = x0 + 1.0
    ys = [s.mean + (s.std if s.std is not None else 0) for s in series.values()]
    y1 = max(1.0, float(max((y.max() for y in ys), default=1.0)))
    y0 = min(0.0, float(min((s.mean.min() for s in series.values()), default=0.0)))

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{left}" y="18" font-size="13">{escape(title)}</text>')
    for i in range(6):
        yv = y0 + (y1 - y0) * i / 5
        out.append(f'<line x1="{left}" x2="{left + pw}" y1="{py(yv):.1f}" y2="{py(yv):.1f}" stroke="#eee"/>')
        out.append(f'<text x="{left - 6}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.2g}</text>')
    for i in range(6):
        xv = x0 + (x1 - x0) * i / 5
        out.append(f'<text x="{px(xv):.1f}" y="{top + ph + 16}" text-anchor="middle">{xv:.3g}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">environment steps</text>')
    out.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2})">{escape(ylabel)}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        if s.std is not None:
            upper = [f"{px(x):.1f},{py(y):.1f}" for x, y in zip(s.x, s.mean + s.std)]
            lower = [f"{px(x):.1f},{py(y):.1f}" for x, y in zip(s.x[::-1], (s.mean - s.std)[::-1])]
            out.append(f'<polygon class="band" points="{" ".join(upper + lower)}" fill="{color}" '
                       f'fill-opacity="0.2" stroke="none"/>')
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(s.x, s.mean))
        out.append(f'<polyline class="curve" points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"/>')
        ly = top + 12 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" x2="{left + pw + 28}" y1="{ly - 4}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_metrics(paths: list[str], columns: list[str] | None = None, title: str = "") -> str:
    if not paths:
        raise ValueError("at least one metrics file is required")
    runs = [read_metrics(p) for p in paths]
    columns = columns or default_columns(runs)
    series = {}
    for col in columns:
        s = aggregate(runs, col)
        if s is not None:
            series[col] = s
    if not series:
        raise CsvFormatError(f"none of the columns {', '.join(columns)} has data")
    return render_svg(series, title=title)
