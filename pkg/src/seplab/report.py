"""Summary CSV -> self-contained SVG bar chart of mean |delta test error| per setup."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

from .experiment import PROVENANCE_HEADER, SUMMARY_HEADER

WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 90


class SchemaError(ValueError):
    """The CSV does not follow the summary schema."""


@dataclass(frozen=True)
class Bar:
    setup: str
    value: float  # mean |delta| in percent; nan if no trial survived


def read_summary(text: str) -> list[Bar]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SchemaError("empty file: expected a summary header")
    header = [h.strip() for h in rows[0]]
    if header not in (SUMMARY_HEADER, SUMMARY_HEADER + PROVENANCE_HEADER):
        raise SchemaError(f"header {','.join(header)!r} does not match {','.join(SUMMARY_HEADER)!r}")
    bars = []
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != len(header):
            raise SchemaError(f"line {lineno}: {len(row)} fields, expected {len(header)}")
        try:
            value = float(row[1])
            int(row[3]), int(row[4])
        except ValueError:
            raise SchemaError(f"line {lineno}: non-numeric field") from None
        if value < 0:
            raise SchemaError(f"line {lineno}: negative mean |delta|")
        bars.append(Bar(row[0], value))
    return bars


def _nice_max(v: float) -> float:
    if v <= 0:
        return 1.0
    exp = 10 ** math.floor(math.log10(v))
    for m in (1, 2, 2.5, 5, 10):
        if v <= m * exp:
            return m * exp
    return 10 * exp


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if v != int(v) else str(int(v))


def render_svg(bars: list[Bar], title: str = "Absolute difference from baseline (test error, %)") -> str:
    """Deterministic SVG text: identical bars give identical bytes."""
    finite = [b.value for b in bars if math.isfinite(b.value)]
    top = _nice_max(max(finite, default=0.0))
    plot_w, plot_h = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
    base_y = TOP + plot_h
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    for i in range(5):
        v = top * i / 4
        y = base_y - plot_h * i / 4
        out.append(f'<line x1="{LEFT - 4}" y1="{y:.2f}" x2="{LEFT + plot_w}" y2="{y:.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{LEFT - 8}" y="{y + 4:.2f}" text-anchor="end">{_fmt(v)}</text>')
    out.append(f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{base_y}" stroke="black"/>')
    out.append(f'<line x1="{LEFT}" y1="{base_y}" x2="{LEFT + plot_w}" y2="{base_y}" stroke="black"/>')
    out.append(
        f'<text x="18" y="{TOP + plot_h / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {TOP + plot_h / 2:.2f})">mean |&#916; error| (%)</text>'
    )
    if bars:
        slot = plot_w / len(bars)
        bw = slot * 0.6
        for i, b in enumerate(bars):
            x = LEFT + slot * i + (slot - bw) / 2
            cx = x + bw / 2
            if math.isfinite(b.value):
                h = plot_h * b.value / top
                out.append(
                    f'<rect class="bar" x="{x:.2f}" y="{base_y - h:.2f}" width="{bw:.2f}" '
                    f'height="{h:.2f}" fill="#4c72b0"><title>{escape(b.setup)}</title></rect>'
                )
                label = f"{b.value:.2f}%"
                ly = base_y - h - 5
            else:
                label, ly = "n/a", base_y - 5
            out.append(f'<text x="{cx:.2f}" y="{ly:.2f}" text-anchor="middle">{label}</text>')
            out.append(
                f'<text x="{cx:.2f}" y="{base_y + 14}" text-anchor="end" '
                f'transform="rotate(-35 {cx:.2f} {base_y + 14})">{escape(b.setup)}</text>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"
