"""Dependency-free SVG rendering of level-wise error curves on a log10 axis."""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def curves_from_csv(text: str, metric: str = "mse") -> dict[str, tuple[list[int], np.ndarray, np.ndarray]]:
    """method -> (levels, geometric mean, std of log10) over trials from a long results CSV."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or metric not in rows[0]:
        raise ValueError(f"CSV has no {metric!r} column")
    by = defaultdict(lambda: defaultdict(list))
    for r in rows:
        v = float(r[metric])
        if v > 0 and math.isfinite(v):
            by[r["method"]][int(r["level"])].append(math.log10(v))
    out = {}
    for m in sorted(by):
        levels = sorted(by[m])
        logs = [np.array(by[m][l]) for l in levels]
        out[m] = (levels, np.array([10 ** x.mean() for x in logs]), np.array([x.std() for x in logs]))
    return out


def _f(x: float) -> str:
    return f"{x:.2f}"


def render_svg(curves: dict[str, tuple[list[int], np.ndarray, np.ndarray]], *,
               title: str = "", ylabel: str = "log10 MSE", width: int = 640, height: int = 420) -> str:
    if not curves:
        raise ValueError("nothing to plot")
    left, right, top, bottom = 70, 130, 40, 50
    pw, ph = width - left - right, height - top - bottom
    all_levels = sorted({l for lv, _, _ in curves.values() for l in lv})
    lo = min(float(np.min(np.log10(g) - s)) for _, g, s in curves.values())
    hi = max(float(np.max(np.log10(g) + s)) for _, g, s in curves.values())
    ymin, ymax = math.floor(lo), math.ceil(hi)
    if ymax == ymin:
        ymax += 1
    xmin, xmax = all_levels[0], all_levels[-1]
    xspan = max(xmax - xmin, 1)

    def X(level):
        return left + pw * (level - xmin) / xspan

    def Y(logv):
        return top + ph * (ymax - logv) / (ymax - ymin)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        parts.append(f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{title}</text>')
    for t in range(ymin, ymax + 1):
        y = Y(t)
        parts.append(f'<line x1="{left}" y1="{_f(y)}" x2="{left + pw}" y2="{_f(y)}" stroke="#ddd"/>')
        parts.append(f'<text x="{left - 8}" y="{_f(y + 4)}" text-anchor="end">{t}</text>')
    for l in all_levels:
        x = X(l)
        parts.append(f'<line x1="{_f(x)}" y1="{top + ph}" x2="{_f(x)}" y2="{top + ph + 5}" stroke="black"/>')
        parts.append(f'<text x="{_f(x)}" y="{top + ph + 20}" text-anchor="middle">{l}</text>')
    parts.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">level</text>')
    parts.append(f'<text x="18" y="{top + ph / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 18 {top + ph / 2:.1f})">{ylabel}</text>')
    for i, (m, (levels, gm, sd)) in enumerate(curves.items()):
        col = PALETTE[i % len(PALETTE)]
        lg = np.log10(gm)
        upper = [f"{_f(X(l))},{_f(Y(v + s))}" for l, v, s in zip(levels, lg, sd)]
        lower = [f"{_f(X(l))},{_f(Y(v - s))}" for l, v, s in zip(levels, lg, sd)][::-1]
        parts.append(f'<polygon points="{" ".join(upper + lower)}" fill="{col}" fill-opacity="0.15" stroke="none"/>')
        pts = " ".join(f"{_f(X(l))},{_f(Y(v))}" for l, v in zip(levels, lg))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="2"/>')
        for l, v in zip(levels, lg):
            parts.append(f'<circle cx="{_f(X(l))}" cy="{_f(Y(v))}" r="3" fill="{col}"/>')
        ly = top + 14 + 18 * i
        parts.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 32}" y2="{ly - 4}" '
                     f'stroke="{col}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 38}" y="{ly}">{m}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def plot_csv(text: str, metric: str = "mse", title: str = "") -> str:
    return render_svg(curves_from_csv(text, metric), title=title, ylabel=f"log10 {metric}")
