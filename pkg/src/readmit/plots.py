"""Minimal deterministic SVG renderings (no timestamps, no random ids)."""
from __future__ import annotations

import math
import re
from typing import Sequence
from xml.sax.saxutils import escape, unescape

import numpy as np

W, H = 480, 400
ML, MR, MT, MB = 60, 20, 30, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _f(v: float) -> str:
    return f"{v:.2f}"


def _axes(title, xlabel, ylabel, xlim, ylim, width=W, height=H):
    x0, x1 = xlim
    y0, y1 = ylim
    pw, ph = width - ML - MR, height - MT - MB

    def sx(x):
        return ML + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return MT + ph - (y - y0) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{ML}" y1="{MT + ph}" x2="{ML + pw}" y2="{MT + ph}" stroke="black"/>',
        f'<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{MT + ph}" stroke="black"/>',
        f'<text x="{ML + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{MT + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {MT + ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for t in np.linspace(x0, x1, 6):
        parts.append(f'<line x1="{_f(sx(t))}" y1="{MT + ph}" x2="{_f(sx(t))}" y2="{MT + ph + 4}" stroke="black"/>')
        parts.append(f'<text x="{_f(sx(t))}" y="{MT + ph + 16}" text-anchor="middle">{t:.2g}</text>')
    for t in np.linspace(y0, y1, 6):
        parts.append(f'<line x1="{ML - 4}" y1="{_f(sy(t))}" x2="{ML}" y2="{_f(sy(t))}" stroke="black"/>')
        parts.append(f'<text x="{ML - 6}" y="{_f(sy(t) + 4)}" text-anchor="end">{t:.3g}</text>')
    return parts, sx, sy


def line_plot(series: Sequence[tuple[str, Sequence[float], Sequence[float]]], title: str,
              xlabel: str, ylabel: str, xlim=(0.0, 1.0), ylim=None, diagonal: bool = False,
              markers: bool = False) -> str:
    """Polyline chart; non-finite points are skipped."""
    if ylim is None:
        finite = [v for _, _, ys in series for v in ys if math.isfinite(v)]
        top = max(finite) if finite else 1.0
        ylim = (0.0, top * 1.05 if top > 0 else 1.0)
    parts, sx, sy = _axes(title, xlabel, ylabel, xlim, ylim)
    if diagonal:
        parts.append(f'<line x1="{_f(sx(xlim[0]))}" y1="{_f(sy(ylim[0]))}" x2="{_f(sx(xlim[1]))}" '
                     f'y2="{_f(sy(ylim[1]))}" stroke="gray" stroke-dasharray="4 3"/>')
    for k, (label, xs, ys) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = [(x, y) for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y)]
        if pts:
            path = " ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in pts)
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        if markers:
            parts += [f'<circle cx="{_f(sx(x))}" cy="{_f(sy(y))}" r="2.5" fill="{color}"/>' for x, y in pts]
        parts.append(f'<text x="{ML + 8}" y="{MT + 14 + 14 * k}" fill="{color}">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _color(t: float) -> str:
    # blue (low) to red (high)
    t = min(1.0, max(0.0, t))
    r, g, b = int(30 + 200 * t), int(90 + 40 * (1 - abs(2 * t - 1))), int(230 - 200 * t)
    return f"#{r:02x}{g:02x}{b:02x}"


def beeswarm(names: Sequence[str], values: np.ndarray, attributions: np.ndarray,
             title: str = "SHAP summary") -> str:
    """One horizontal lane per feature (top = first name), points colored by value.

    ``values`` and ``attributions`` are ``n_rows x len(names)`` in lane order.
    """
    n = len(names)
    lane = 22
    height = MT + MB + lane * max(n, 1)
    width = 560
    a = np.asarray(attributions, dtype=np.float64)
    lim = float(np.abs(a).max()) if a.size else 1.0
    lim = lim if lim > 0 else 1.0
    left = 170
    pw = width - left - MR

    def sx(v):
        return left + (v + lim) / (2 * lim) * pw

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{_f(sx(0))}" y1="{MT}" x2="{_f(sx(0))}" y2="{MT + lane * n}" stroke="gray"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">attribution</text>',
    ]
    for j, name in enumerate(names):
        cy = MT + lane * j + lane / 2
        parts.append(f'<g class="lane" data-feature="{escape(name)}">')
        parts.append(f'<text x="{left - 6}" y="{_f(cy + 4)}" text-anchor="end">{escape(name)}</text>')
        v = np.asarray(values[:, j], dtype=np.float64)
        lo, hi = (float(v.min()), float(v.max())) if len(v) else (0.0, 1.0)
        span = hi - lo if hi > lo else 1.0
        for i in range(len(v)):
            # deterministic jitter from the row index
            jitter = ((i * 2654435761) % 1000) / 1000.0 - 0.5
            parts.append(f'<circle cx="{_f(sx(a[i, j]))}" cy="{_f(cy + jitter * lane * 0.7)}" r="1.6" '
                         f'fill="{_color((v[i] - lo) / span)}"/>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def lane_order(svg: str) -> list[str]:
    """Feature names of the beeswarm lanes, top to bottom."""
    return [unescape(m) for m in re.findall(r'<g class="lane" data-feature="([^"]*)">', svg)]
