"""Standalone SVG line plots with the plotted data embedded as CSV.

No plotting dependency: the file is assembled as text. Each plot carries its
own numbers in a <metadata> block so a reader can recover them with a text
editor, and every figure renders identically everywhere.
"""

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f6feb", "#d1242f", "#1a7f37", "#9a6700", "#8250df", "#bf3989")

WIDTH = 840
HEIGHT = 480
MARGIN_L = 64
MARGIN_R = 18
MARGIN_T = 34
MARGIN_B = 46


@dataclass(frozen=True)
class Series:
    """One labeled curve; band, when present, is a (lo, hi) envelope."""

    label: str
    x: np.ndarray
    y: np.ndarray
    band: tuple | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.shape != y.shape or x.ndim != 1:
            raise ValueError("x and y must be equal-length 1-d arrays")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if self.band is not None:
            lo = np.asarray(self.band[0], dtype=np.float64)
            hi = np.asarray(self.band[1], dtype=np.float64)
            if lo.shape != x.shape or hi.shape != x.shape:
                raise ValueError("band arrays must match x")
            object.__setattr__(self, "band", (lo, hi))


def nice_ticks(lo, hi, target=6):
    """Round tick positions covering [lo, hi] at a 1/2/5 step."""
    if not (np.isfinite(lo) and np.isfinite(hi)):
        lo, hi = 0.0, 1.0
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(target, 2)
    mag = 10.0 ** np.floor(np.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        step = mult * mag
        if raw <= step:
            break
    first = np.ceil(lo / step) * step
    ticks = np.arange(first, hi + 1e-9 * step, step)
    # snap near-zero ticks so labels read 0 rather than 1.2e-16
    ticks[np.abs(ticks) < 1e-9 * step] = 0.0
    return ticks


def _finite_chunks(x, y):
    """Split a curve into runs of finite points so gaps break the line."""
    ok = np.isfinite(x) & np.isfinite(y)
    chunks = []
    start = None
    for i, good in enumerate(ok):
        if good and start is None:
            start = i
        elif not good and start is not None:
            chunks.append((start, i))
            start = None
    if start is not None:
        chunks.append((start, len(ok)))
    return chunks


def _data_csv(series):
    lines = ["label,x,y"]
    for s in series:
        for xi, yi in zip(s.x, s.y):
            lines.append(f"{s.label},{xi!r},{yi!r}")
    return "\n".join(lines)


def line_plot(series, *, title="", xlabel="", ylabel="",
              width=WIDTH, height=HEIGHT) -> str:
    """Render labeled curves to an SVG document string."""
    series = list(series)
    if not series:
        raise ValueError("need at least one series")
    xs = np.concatenate([s.x for s in series])
    ys = [s.y for s in series]
    for s in series:
        if s.band is not None:
            ys.extend(s.band)
    ys = np.concatenate(ys)
    xs = xs[np.isfinite(xs)]
    ys = ys[np.isfinite(ys)]
    x_lo, x_hi = (xs.min(), xs.max()) if xs.size else (0.0, 1.0)
    y_lo, y_hi = (ys.min(), ys.max()) if ys.size else (0.0, 1.0)
    if x_hi <= x_lo:
        x_lo, x_hi = x_lo - 0.5, x_lo + 0.5
    if y_hi <= y_lo:
        y_lo, y_hi = y_lo - 0.5, y_lo + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo -= pad
    y_hi += pad

    plot_w = width - MARGIN_L - MARGIN_R
    plot_h = height - MARGIN_T - MARGIN_B

    def px(v):
        return MARGIN_L + (v - x_lo) / (x_hi - x_lo) * plot_w

    def py(v):
        return MARGIN_T + (y_hi - v) / (y_hi - y_lo) * plot_h

    out = []
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
               f'height="{height}" viewBox="0 0 {width} {height}" '
               f'font-family="sans-serif" font-size="12">')
    out.append(f"<metadata id=\"plot-data\">{escape(_data_csv(series))}"
               f"</metadata>")
    out.append(f'<rect width="{width}" height="{height}" fill="white"/>')

    for t in nice_ticks(x_lo, x_hi):
        x = px(t)
        out.append(f'<line x1="{x:.2f}" y1="{MARGIN_T}" x2="{x:.2f}" '
                   f'y2="{MARGIN_T + plot_h}" stroke="#e5e5e5"/>')
        out.append(f'<text x="{x:.2f}" y="{MARGIN_T + plot_h + 16}" '
                   f'text-anchor="middle">{t:g}</text>')
    for t in nice_ticks(y_lo, y_hi):
        y = py(t)
        out.append(f'<line x1="{MARGIN_L}" y1="{y:.2f}" '
                   f'x2="{MARGIN_L + plot_w}" y2="{y:.2f}" stroke="#e5e5e5"/>')
        out.append(f'<text x="{MARGIN_L - 6}" y="{y + 4:.2f}" '
                   f'text-anchor="end">{t:g}</text>')
    out.append(f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" '
               f'height="{plot_h}" fill="none" stroke="#444"/>')

    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        if s.band is not None:
            lo, hi = s.band
            for a, b in _finite_chunks(s.x, lo + hi):
                fwd = " ".join(f"{px(s.x[k]):.2f},{py(hi[k]):.2f}"
                               for k in range(a, b))
                rev = " ".join(f"{px(s.x[k]):.2f},{py(lo[k]):.2f}"
                               for k in range(b - 1, a - 1, -1))
                out.append(f'<polygon points="{fwd} {rev}" fill="{color}" '
                           f'fill-opacity="0.15" stroke="none"/>')
        for a, b in _finite_chunks(s.x, s.y):
            pts = " ".join(f"{px(s.x[k]):.2f},{py(s.y[k]):.2f}"
                           for k in range(a, b))
            if b - a == 1:
                out.append(f'<circle cx="{px(s.x[a]):.2f}" '
                           f'cy="{py(s.y[a]):.2f}" r="2" fill="{color}"/>')
            else:
                out.append(f'<polyline points="{pts}" fill="none" '
                           f'stroke="{color}" stroke-width="1.6"/>')

    legend_x = MARGIN_L + plot_w - 10
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        y = MARGIN_T + 14 + 16 * i
        out.append(f'<line x1="{legend_x - 26}" y1="{y - 4}" '
                   f'x2="{legend_x - 8}" y2="{y - 4}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{legend_x - 30}" y="{y}" '
                   f'text-anchor="end">{escape(s.label)}</text>')

    if title:
        out.append(f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" '
                   f'font-size="15">{escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{MARGIN_L + plot_w / 2:.0f}" '
                   f'y="{height - 10}" text-anchor="middle">'
                   f'{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="16" y="{MARGIN_T + plot_h / 2:.0f}" '
                   f'text-anchor="middle" transform="rotate(-90 16 '
                   f'{MARGIN_T + plot_h / 2:.0f})">{escape(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out)


def write_plot(path, series, **kwargs):
    svg = line_plot(series, **kwargs)
    with open(path, "w") as fh:
        fh.write(svg)
    return svg
