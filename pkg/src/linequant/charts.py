"""Deterministic SVG line charts with CSV companions for metrics files."""

from __future__ import annotations

from pathlib import Path

_WIDTH, _HEIGHT = 640, 400
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 64, 16, 24, 44
_COLORS = ("#1f6fb2", "#d1495b", "#3e8e41", "#a05cb5", "#d88a2a", "#4a4a4a")


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def write_line_chart(series: list[tuple[str, list[float], list[float]]],
                     out_svg: Path, out_csv: Path,
                     xlabel: str = "iteration", ylabel: str = "value") -> None:
    """Render one polyline per (label, xs, ys) series; bytes depend only on input."""
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    plot_w = _WIDTH - _MARGIN_L - _MARGIN_R
    plot_h = _HEIGHT - _MARGIN_T - _MARGIN_B

    def sx(x: float) -> float:
        return _MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y: float) -> float:
        return _MARGIN_T + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<rect x="{_MARGIN_L}" y="{_MARGIN_T}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="#222" stroke-width="1"/>',
    ]
    for tick in _ticks(x_lo, x_hi):
        px = sx(tick)
        parts.append(f'<line x1="{_fmt(px)}" y1="{_MARGIN_T + plot_h}" '
                     f'x2="{_fmt(px)}" y2="{_MARGIN_T + plot_h + 5}" stroke="#222"/>')
        parts.append(f'<text x="{_fmt(px)}" y="{_MARGIN_T + plot_h + 18}" '
                     f'font-size="11" text-anchor="middle" font-family="monospace">'
                     f'{_fmt(tick)}</text>')
    for tick in _ticks(y_lo, y_hi):
        py = sy(tick)
        parts.append(f'<line x1="{_MARGIN_L - 5}" y1="{_fmt(py)}" '
                     f'x2="{_MARGIN_L}" y2="{_fmt(py)}" stroke="#222"/>')
        parts.append(f'<text x="{_MARGIN_L - 8}" y="{_fmt(py + 4)}" font-size="11" '
                     f'text-anchor="end" font-family="monospace">{_fmt(tick)}</text>')
    parts.append(f'<text x="{_MARGIN_L + plot_w / 2}" y="{_HEIGHT - 8}" font-size="12" '
                 f'text-anchor="middle" font-family="monospace">{xlabel}</text>')
    parts.append(f'<text x="14" y="{_MARGIN_T + plot_h / 2}" font-size="12" '
                 f'text-anchor="middle" font-family="monospace" '
                 f'transform="rotate(-90 14 {_MARGIN_T + plot_h / 2})">{ylabel}</text>')

    for i, (label, xs, ys) in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        points = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        ly = _MARGIN_T + 14 + 16 * i
        parts.append(f'<line x1="{_MARGIN_L + 10}" y1="{ly - 4}" x2="{_MARGIN_L + 34}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{_MARGIN_L + 40}" y="{ly}" font-size="11" '
                     f'font-family="monospace">{label}</text>')
    parts.append("</svg>")
    Path(out_svg).write_text("\n".join(parts) + "\n", encoding="utf-8", newline="\n")

    rows = ["series,x,y"]
    for label, xs, ys in series:
        for x, y in zip(xs, ys):
            rows.append(f"{label},{_fmt(x)},{_fmt(y)}")
    Path(out_csv).write_text("\n".join(rows) + "\n", encoding="utf-8", newline="\n")
