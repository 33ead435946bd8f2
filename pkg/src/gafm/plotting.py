"""Self-contained SVG loss curves (no plotting backend needed)."""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

__all__ = ["loss_curve_svg"]

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def loss_curve_svg(series: dict, title: str = "loss", width: int = 640, height: int = 400) -> str:
    """Line chart of named per-epoch series on a log10 y axis when all values are positive."""
    left, right, top, bottom = 70, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    values = [v for ys in series.values() for v in ys if math.isfinite(v)]
    n = max((len(ys) for ys in series.values()), default=1)
    use_log = bool(values) and min(values) > 0
    tf = (lambda v: math.log10(v)) if use_log else (lambda v: v)
    lo = min(map(tf, values)) if values else 0.0
    hi = max(map(tf, values)) if values else 1.0
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5

    def xy(i: int, v: float) -> tuple[float, float]:
        x = left + (pw * i / (n - 1) if n > 1 else pw / 2)
        y = top + ph * (1 - (tf(v) - lo) / (hi - lo))
        return x, y

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="16">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = lo + (hi - lo) * frac
        y = top + ph * (1 - frac)
        label = f"{10 ** v:.3g}" if use_log else f"{v:.3g}"
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{label}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12">epoch (1..{n})</text>')
    for k, (name, ys) in enumerate(series.items()):
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join("%.2f,%.2f" % xy(i, v) for i, v in enumerate(ys) if math.isfinite(v))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{left + 10}" y="{top + 16 + 16 * k}" fill="{color}" font-family="sans-serif" '
                   f'font-size="12">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def report_svg(train: Sequence[float], val: Sequence[float], title: str) -> str:
    return loss_curve_svg({"train": list(train), "validation": list(val)}, title)
