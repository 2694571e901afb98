"""Report files: CSV tables, minimal SVG line charts and the run MANIFEST."""

from __future__ import annotations

import csv
import io
import math
import platform
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    text = buf.getvalue()
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return text


def _ticks(lo: float, hi: float, log: bool) -> list[float]:
    if log:
        a, b = math.floor(math.log10(lo)), math.ceil(math.log10(hi))
        return [10.0**k for k in range(a, b + 1)]
    step = 10 ** math.floor(math.log10(max(hi - lo, 1e-300)))
    if (hi - lo) / step < 3:
        step /= 2
    k0 = math.floor(lo / step)
    return [k * step for k in range(k0, k0 + int((hi - lo) / step) + 2)]


def line_chart(series: dict[str, Sequence[tuple[float, float]]], title: str = "", xlabel: str = "",
               ylabel: str = "", logx: bool = True, logy: bool = True, notes: Sequence[str] = (),
               width: int = 640, height: int = 420) -> str:
    """SVG markup for a few polylines with axes, ticks and a legend."""
    pts = [(x, y) for s in series.values() for x, y in s
           if math.isfinite(x) and math.isfinite(y) and (x > 0 or not logx) and (y > 0 or not logy)]
    if not pts:
        pts = [(1.0, 1.0), (10.0, 10.0)]
    tx = (lambda v: math.log10(v)) if logx else (lambda v: v)
    ty = (lambda v: math.log10(v)) if logy else (lambda v: v)
    xs, ys = [tx(x) for x, _ in pts], [ty(y) for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    padx, pady = 0.05 * (x1 - x0), 0.08 * (y1 - y0)
    x0, x1, y0, y1 = x0 - padx, x1 + padx, y0 - pady, y1 + pady
    L, R, T, B = 70, 170, 40, 50

    def px(v):
        return L + (v - x0) / (x1 - x0) * (width - L - R)

    def py(v):
        return height - B - (v - y0) / (y1 - y0) * (height - T - B)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{L}" y1="{height - B}" x2="{width - R}" y2="{height - B}" stroke="black"/>',
           f'<line x1="{L}" y1="{T}" x2="{L}" y2="{height - B}" stroke="black"/>']
    inv = (lambda v: 10**v) if logx else (lambda v: v)
    for t in _ticks(inv(x0), inv(x1), logx):
        v = tx(t)
        if x0 <= v <= x1:
            out.append(f'<line x1="{px(v):.1f}" y1="{height - B}" x2="{px(v):.1f}" y2="{height - B + 5}" stroke="black"/>')
            out.append(f'<text x="{px(v):.1f}" y="{height - B + 18}" text-anchor="middle">{t:g}</text>')
    inv = (lambda v: 10**v) if logy else (lambda v: v)
    for t in _ticks(inv(y0), inv(y1), logy):
        v = ty(t)
        if y0 <= v <= y1:
            out.append(f'<line x1="{L - 5}" y1="{py(v):.1f}" x2="{L}" y2="{py(v):.1f}" stroke="black"/>')
            out.append(f'<text x="{L - 8}" y="{py(v) + 4:.1f}" text-anchor="end">{t:g}</text>')
    out.append(f'<text x="{(L + width - R) / 2:.1f}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{(T + height - B) / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(T + height - B) / 2:.1f})">{escape(ylabel)}</text>')
    for k, (name, s) in enumerate(series.items()):
        c = _PALETTE[k % len(_PALETTE)]
        good = [(px(tx(x)), py(ty(y))) for x, y in s if math.isfinite(x) and math.isfinite(y)
                and (x > 0 or not logx) and (y > 0 or not logy)]
        if len(good) > 1:
            out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="'
                       + " ".join(f"{a:.1f},{b:.1f}" for a, b in good) + '"/>')
        for a, b in good:
            out.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2.5" fill="{c}"/>')
        ly = T + 16 * k + 6
        out.append(f'<line x1="{width - R + 10}" y1="{ly}" x2="{width - R + 30}" y2="{ly}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{width - R + 35}" y="{ly + 4}">{escape(name)}</text>')
    for k, note in enumerate(notes):
        out.append(f'<text x="{width - R + 10}" y="{T + 16 * (len(series) + k + 1) + 6}">{escape(note)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, *args, **kw) -> None:
    Path(path).write_text(line_chart(*args, **kw))


def write_manifest(path, command: str, seed: int, threads: int, config: dict,
                   extra: Sequence[tuple[str, object]] = ()) -> None:
    """Seeds, library versions, the full config echo and run-specific facts."""
    import numba
    import numpy
    import scipy

    from . import __version__
    lines = [f"command = {command}", f"seed = {seed}", f"threads = {threads}",
             f"smoothnet = {__version__}", f"python = {platform.python_version()}",
             f"numpy = {numpy.__version__}", f"scipy = {scipy.__version__}", f"numba = {numba.__version__}",
             "", "[config]"]
    lines += [f"{k} = {fmt(v) if not isinstance(v, (list, tuple)) else ','.join(fmt(x) for x in v)}"
              for k, v in sorted(config.items())]
    if extra:
        lines += ["", "[run]"] + [f"{k} = {fmt(v)}" for k, v in extra]
    Path(path).write_text("\n".join(lines) + "\n")
