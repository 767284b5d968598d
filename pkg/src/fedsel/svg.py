"""Dependency-free SVG charts: multi-series line plot and per-client bar histogram."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

from .exceptions import UsageError

WIDTH, HEIGHT = 800, 500
LEFT, RIGHT, TOP, BOTTOM = 70, 190, 50, 60
TICKS = 10
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _nice_range(lo: float, hi: float):
    # spans below float resolution at this magnitude cannot be ticked
    if hi - lo <= 1e-9 * max(1.0, abs(lo), abs(hi)):
        hi = lo + 1.0
    base = 10 ** math.floor(math.log10((hi - lo) / TICKS))
    for step in (base * m for m in (1, 2, 2.5, 5, 10, 20, 25, 50, 100)):
        start = math.floor(lo / step) * step
        if start > lo:  # lo / step underflowed or rounded up
            start -= step
        if start + step * TICKS >= hi:
            return start, start + step * TICKS
    raise AssertionError("unreachable: 100x base step always covers the range")


def _tick_label(v: float) -> str:
    text = f"{v:.4g}"
    return "0" if text == "-0" else text


def _frame(title, x_label, y_label, x_range, y_range, numeric_x=True):
    plot_w, plot_h = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
    (x0, x1), (y0, y1) = x_range, y_range

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * plot_w

    def py(y):
        return TOP + plot_h - (y - y0) / (y1 - y0) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
        f'width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        f'<text x="{WIDTH / 2:.1f}" y="25" text-anchor="middle" font-size="16">{escape(title)}</text>',
    ]
    for i in range(TICKS + 1):
        yv = y0 + (y1 - y0) * i / TICKS
        y = py(yv)
        out.append(f'<line x1="{LEFT}" y1="{_fmt(y)}" x2="{LEFT + plot_w}" y2="{_fmt(y)}" stroke="#e5e5e5"/>')
        out.append(f'<text x="{LEFT - 6}" y="{_fmt(y + 4)}" text-anchor="end">{_tick_label(yv)}</text>')
        if not numeric_x:
            continue
        xv = x0 + (x1 - x0) * i / TICKS
        x = px(xv)
        out.append(f'<line x1="{_fmt(x)}" y1="{TOP + plot_h}" x2="{_fmt(x)}" y2="{TOP + plot_h + 5}" stroke="#000000"/>')
        out.append(f'<text x="{_fmt(x)}" y="{TOP + plot_h + 18}" text-anchor="middle">{_tick_label(xv)}</text>')
    out.append(f'<line x1="{LEFT}" y1="{TOP + plot_h}" x2="{LEFT + plot_w}" y2="{TOP + plot_h}" stroke="#000000"/>')
    out.append(f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + plot_h}" stroke="#000000"/>')
    out.append(
        f'<text x="{LEFT + plot_w / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle">{escape(x_label)}</text>'
    )
    out.append(
        f'<text x="18" y="{TOP + plot_h / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {TOP + plot_h / 2:.1f})">{escape(y_label)}</text>'
    )
    return out, px, py


def _legend(names):
    out = ['<g class="legend">']
    x = WIDTH - RIGHT + 15
    for i, name in enumerate(names):
        y = TOP + 10 + 20 * i
        color = COLORS[i % len(COLORS)]
        out.append(f'<rect x="{x}" y="{y - 8}" width="14" height="10" fill="{color}"/>')
        out.append(f'<text x="{x + 20}" y="{y + 1}">{escape(name)}</text>')
    out.append("</g>")
    return out


def line_chart(series: dict, title="Test accuracy", x_label="Communication round",
               y_label="Accuracy", x_values=None) -> str:
    """``series`` maps legend name -> list of y values (one polyline each)."""
    if not series or any(len(v) == 0 for v in series.values()):
        raise UsageError("line chart needs at least one non-empty series")
    longest = max(len(v) for v in series.values())
    xs = list(x_values) if x_values is not None else list(range(1, longest + 1))
    ys = [y for v in series.values() for y in v]
    x_range = _nice_range(min(xs), max(xs))
    y_range = _nice_range(min(ys), max(ys))
    out, px, py = _frame(title, x_label, y_label, x_range, y_range)
    for i, (name, values) in enumerate(series.items()):
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, values))
        color = COLORS[i % len(COLORS)]
        out.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}">'
            f"<title>{escape(name)}</title></polyline>"
        )
    out += _legend(list(series))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def histogram(counts: dict, title="Participation per client", x_label="Client ID",
              y_label="Participations") -> str:
    """Bar chart with one bar per client.

    ``counts`` is either ``{client_id: count}`` or, for grouped bars,
    ``{series name: {client_id: count}}``.
    """
    if not counts:
        raise UsageError("histogram needs data")
    grouped = all(isinstance(v, dict) for v in counts.values())
    groups = counts if grouped else {"": counts}
    if any(not g for g in groups.values()):
        raise UsageError("histogram needs data")
    clients = sorted({cid for g in groups.values() for cid in g})
    top = max(v for g in groups.values() for v in g.values())
    y_range = _nice_range(0.0, float(max(top, 1)))
    out, px, py = _frame(title, x_label, y_label, (0.0, float(len(clients))), y_range,
                         numeric_x=False)
    slot = px(1.0) - px(0.0)
    width = slot * 0.8 / len(groups)
    for gi, (name, g) in enumerate(groups.items()):
        color = COLORS[gi % len(COLORS)]
        for ci, cid in enumerate(clients):
            v = g.get(cid, 0)
            x = px(ci) + slot * 0.1 + gi * width
            y = py(v)
            out.append(
                f'<rect class="bar" x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(width)}" '
                f'height="{_fmt(py(0.0) - y)}" fill="{color}"><title>{escape(str(cid))}: {v}</title></rect>'
            )
    for ci, cid in enumerate(clients):
        out.append(
            f'<text x="{_fmt(px(ci + 0.5))}" y="{HEIGHT - BOTTOM + 18}" text-anchor="middle">{cid}</text>'
        )
    if grouped:
        out += _legend(list(groups))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_svg(data, path, style: str = "line", **kwargs) -> Path:
    """Write a line chart (``style="line"``) or histogram (``style="histogram"``)."""
    if style == "line":
        text = line_chart(data, **kwargs)
    elif style == "histogram":
        text = histogram(data, **kwargs)
    else:
        raise UsageError(f"unknown chart style {style!r}")
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path
