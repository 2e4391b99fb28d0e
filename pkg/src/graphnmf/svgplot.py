"""Dependency-free SVG line charts for evaluation reports."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=50)


def _fmt(v):
    return f"{v:.2f}"


class _Axes:
    def __init__(self, xs, ys, log_y):
        self.log_y = log_y
        finite = [self._ty(y) for y in ys if self._ok(y)]
        self.x0, self.x1 = min(xs), max(xs)
        if self.x0 == self.x1:
            self.x1 = self.x0 + 1
        self.y0, self.y1 = (min(finite), max(finite)) if finite else (0.0, 1.0)
        if self.y0 == self.y1:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5
        self.pw = WIDTH - MARGIN["left"] - MARGIN["right"]
        self.ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def _ok(self, y):
        return math.isfinite(y) and (y > 0 or not self.log_y)

    def _ty(self, y):
        return math.log10(y) if self.log_y else y

    def px(self, x):
        return MARGIN["left"] + (x - self.x0) / (self.x1 - self.x0) * self.pw

    def py(self, y):
        return MARGIN["top"] + (1 - (self._ty(y) - self.y0) / (self.y1 - self.y0)) * self.ph

    def y_ticks(self, count=5):
        for k in range(count + 1):
            t = self.y0 + (self.y1 - self.y0) * k / count
            yield t, (f"1e{t:.1f}" if self.log_y else f"{t:.3g}")


def line_chart(series, title, xlabel, ylabel, log_y=False, bands=None) -> str:
    """Render ``{label: (xs, ys)}`` as an SVG document.

    ``bands`` maps a label to ``(xs, lows, highs)`` drawn as a shaded area
    behind the line of the same label.
    """
    bands = bands or {}
    all_x = [x for xs, _ in series.values() for x in xs] or [0, 1]
    all_y = [y for _, ys in series.values() for y in ys]
    for _, lo, hi in bands.values():
        all_y += list(lo) + list(hi)
    ax = _Axes(all_x, all_y, log_y)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]
    left, top = MARGIN["left"], MARGIN["top"]
    right, bottom = left + ax.pw, top + ax.ph
    out.append(f'<rect x="{left}" y="{top}" width="{ax.pw}" height="{ax.ph}" fill="none" stroke="#444"/>')
    for t, label in ax.y_ticks():
        y = MARGIN["top"] + (1 - (t - ax.y0) / (ax.y1 - ax.y0)) * ax.ph
        out.append(f'<line x1="{left}" y1="{_fmt(y)}" x2="{right}" y2="{_fmt(y)}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{_fmt(y + 4)}" text-anchor="end">{label}</text>')
    for x in sorted(set(all_x)):
        out.append(f'<text x="{_fmt(ax.px(x))}" y="{bottom + 18}" text-anchor="middle">{x:g}</text>')
    out.append(f'<text x="{left + ax.pw / 2}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ax.ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ax.ph / 2})">{escape(ylabel)}</text>')
    for k, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        if label in bands:
            bx, lo, hi = bands[label]
            pts = [(x, y) for x, y in zip(bx, hi) if ax._ok(y)]
            pts += [(x, y) for x, y in reversed(list(zip(bx, lo))) if ax._ok(y)]
            if pts:
                poly = " ".join(f"{_fmt(ax.px(x))},{_fmt(ax.py(y))}" for x, y in pts)
                out.append(f'<polygon points="{poly}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        pts = [(x, y) for x, y in zip(xs, ys) if ax._ok(y)]
        if pts:
            line = " ".join(f"{_fmt(ax.px(x))},{_fmt(ax.py(y))}" for x, y in pts)
            out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = top + 16 + 18 * k
        out.append(f'<line x1="{right + 12}" y1="{ly}" x2="{right + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{right + 38}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
