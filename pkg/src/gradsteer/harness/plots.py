"""Minimal hand-written SVG charts (histograms and mean +/- band lines)."""

from __future__ import annotations

import math
from html import escape

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 30, 50


def _scale(lo, hi, a, b):
    span = (hi - lo) or 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def _axes(xlo, xhi, ylo, yhi, xlabel, ylabel, title, ytick_fmt="{:.1f}"):
    sx = _scale(xlo, xhi, LEFT, W - RIGHT)
    sy = _scale(ylo, yhi, H - BOTTOM, TOP)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{H - BOTTOM}" x2="{W - RIGHT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
    ]
    for v in np.linspace(xlo, xhi, 6):
        out.append(f'<text x="{sx(v):.1f}" y="{H - BOTTOM + 15}" text-anchor="middle">{v:.1f}</text>')
    for v in np.linspace(ylo, yhi, 5):
        out.append(f'<text x="{LEFT - 5}" y="{sy(v) + 4:.1f}" text-anchor="end">{ytick_fmt.format(v)}</text>')
    return out, sx, sy


def _legend(labels):
    out = []
    for i, label in enumerate(labels):
        y = TOP + 8 + 14 * i
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<rect x="{W - RIGHT - 130}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{W - RIGHT - 115}" y="{y + 1}">{escape(label)}</text>')
    return out


def histogram_svg(series: dict[str, np.ndarray], bins: int = 40, title: str = "", xlabel: str = "SI-SDRi (dB)") -> str:
    """Overlaid step histograms with log10(1 + count) on the vertical axis."""
    allv = np.concatenate([np.asarray(v, dtype=float) for v in series.values()])
    edges = np.linspace(float(allv.min()), float(allv.max()) + 1e-9, bins + 1)
    counts = {k: np.log10(1 + np.histogram(v, edges)[0]) for k, v in series.items()}
    ymax = max(max(c.max() for c in counts.values()), 1.0)
    out, sx, sy = _axes(edges[0], edges[-1], 0.0, ymax, xlabel, "count (log scale)", title,
                        ytick_fmt="{:.1f}")
    for i, (label, c) in enumerate(counts.items()):
        pts = []
        for j, value in enumerate(c):
            pts += [(sx(edges[j]), sy(value)), (sx(edges[j + 1]), sy(value))]
        path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
        out.append(f'<polyline points="{path}" fill="none" stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="1.5"/>')
    out += _legend(list(counts))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def band_svg(series: dict[str, tuple], title: str = "", xlabel: str = "epoch", ylabel: str = "mean SI-SDRi (dB)",
             n_std: float = 2.0) -> str:
    """Lines of ``mean`` over ``x`` with a shaded ``mean +/- n_std * std`` band per series.

    ``series`` maps label -> (x, mean, std).
    """
    xs = np.concatenate([np.asarray(s[0], float) for s in series.values()])
    lo = min(float(np.min(np.asarray(m) - n_std * np.asarray(s))) for _, m, s in series.values())
    hi = max(float(np.max(np.asarray(m) + n_std * np.asarray(s))) for _, m, s in series.values())
    if not (math.isfinite(lo) and math.isfinite(hi)):
        lo, hi = -1.0, 1.0
    out, sx, sy = _axes(float(xs.min()), float(xs.max()), lo, hi, xlabel, ylabel, title)
    for i, (label, (x, m, s)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        x, m, s = (np.asarray(a, float) for a in (x, m, s))
        upper = [f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x, m + n_std * s)]
        lower = [f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x[::-1], (m - n_std * s)[::-1])]
        out.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x, m))
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
    out += _legend(list(series))
    out.append("</svg>")
    return "\n".join(out) + "\n"
