"""Static SVG figures written as plain text (byte-stable across runs)."""
from __future__ import annotations

from html import escape
from typing import Mapping, Sequence

import numpy as np

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939",
           "#8c6d31", "#843c39", "#7b4173", "#3182bd"]


def _header(width: int, height: int, title: str, desc: str | None) -> list[str]:
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f"<title>{escape(title)}</title>"]
    if desc:
        out.append(f"<desc>{escape(desc)}</desc>")
    out.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    out.append(f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" '
               f'font-size="13">{escape(title)}</text>')
    return out


def scatter_svg(points: np.ndarray, labels: Sequence[str], groups: Sequence[str],
                highlight: Sequence[bool], title: str = "t-SNE of subject embeddings",
                desc: str | None = None, width: int = 520, height: int = 440) -> str:
    """Points coloured by group; highlighted points drawn as hollow diamonds."""
    pts = np.asarray(points, dtype=float)
    margin, legend_w = 40, 110
    plot_w, plot_h = width - 2 * margin - legend_w, height - 2 * margin
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)

    def xy(p):
        x = margin + (p[0] - lo[0]) / span[0] * plot_w
        y = margin + plot_h - (p[1] - lo[1]) / span[1] * plot_h
        return x, y

    order = sorted(set(groups))
    colour = {g: PALETTE[i % len(PALETTE)] for i, g in enumerate(order)}
    out = _header(width, height, title, desc)
    out.append(f'<rect x="{margin}" y="{margin}" width="{plot_w}" height="{plot_h}" '
               f'fill="none" stroke="#999"/>')
    for p, lab, g, hl in zip(pts, labels, groups, highlight):
        x, y = xy(p)
        c = colour[g]
        if hl:
            out.append(f'<path d="M{x:.2f},{y - 7:.2f} L{x + 7:.2f},{y:.2f} L{x:.2f},{y + 7:.2f} '
                       f'L{x - 7:.2f},{y:.2f} Z" fill="none" stroke="{c}" stroke-width="2"/>')
        else:
            out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="5" fill="{c}" '
                       f'fill-opacity="0.7"/>')
        out.append(f'<text x="{x + 8:.2f}" y="{y + 4:.2f}" font-size="9">{escape(lab)}</text>')
    lx = width - legend_w - margin / 2
    for i, g in enumerate(order):
        y = margin + 14 * i
        out.append(f'<circle cx="{lx:.1f}" cy="{y:.1f}" r="4" fill="{colour[g]}"/>')
        out.append(f'<text x="{lx + 8:.1f}" y="{y + 4:.1f}">{escape(g)}</text>')
    y = margin + 14 * len(order) + 6
    out.append(f'<path d="M{lx:.1f},{y - 4:.1f} L{lx + 4:.1f},{y:.1f} L{lx:.1f},{y + 4:.1f} '
               f'L{lx - 4:.1f},{y:.1f} Z" fill="none" stroke="black"/>')
    out.append(f'<text x="{lx + 8:.1f}" y="{y + 4:.1f}">unseen</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_svg(groups: Mapping[str, Mapping[str, float | None]], title: str,
            desc: str | None = None, ylabel: str = "accuracy",
            width: int = 560, height: int = 340) -> str:
    """Grouped bars: ``groups[group][series] -> value in [0, 1]`` (None = absent)."""
    names = list(groups)
    series = []
    for g in names:
        for s in groups[g]:
            if s not in series:
                series.append(s)
    margin, legend_h = 45, 22
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin - legend_h
    out = _header(width, height, title, desc)
    base_y = margin + plot_h
    out.append(f'<line x1="{margin}" y1="{base_y}" x2="{margin + plot_w}" y2="{base_y}" '
               f'stroke="black"/>')
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = base_y - tick * plot_h
        out.append(f'<line x1="{margin - 4}" y1="{y:.1f}" x2="{margin + plot_w}" y2="{y:.1f}" '
                   f'stroke="#ddd"/>')
        out.append(f'<text x="{margin - 6}" y="{y + 4:.1f}" text-anchor="end">{tick:.2f}</text>')
    out.append(f'<text x="12" y="{margin + plot_h / 2:.1f}" transform="rotate(-90 12 '
               f'{margin + plot_h / 2:.1f})" text-anchor="middle">{escape(ylabel)}</text>')
    slot = plot_w / max(len(names), 1)
    bar_w = slot * 0.8 / max(len(series), 1)
    for i, g in enumerate(names):
        x0 = margin + i * slot + slot * 0.1
        for j, s in enumerate(series):
            v = groups[g].get(s)
            x = x0 + j * bar_w
            if v is None:
                out.append(f'<text x="{x + bar_w / 2:.1f}" y="{base_y - 4}" '
                           f'text-anchor="middle" font-size="9">n/a</text>')
                continue
            h = float(v) * plot_h
            out.append(f'<rect x="{x:.1f}" y="{base_y - h:.1f}" width="{bar_w * 0.95:.1f}" '
                       f'height="{h:.1f}" fill="{PALETTE[j % len(PALETTE)]}"/>')
            out.append(f'<text x="{x + bar_w / 2:.1f}" y="{base_y - h - 3:.1f}" '
                       f'text-anchor="middle" font-size="9">{100 * float(v):.1f}</text>')
        out.append(f'<text x="{x0 + 0.4 * slot:.1f}" y="{base_y + 14}" '
                   f'text-anchor="middle">{escape(g)}</text>')
    for j, s in enumerate(series):
        x = margin + j * 120
        y = height - margin / 2
        out.append(f'<rect x="{x}" y="{y - 9:.1f}" width="10" height="10" '
                   f'fill="{PALETTE[j % len(PALETTE)]}"/>')
        out.append(f'<text x="{x + 14}" y="{y:.1f}">{escape(s)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
