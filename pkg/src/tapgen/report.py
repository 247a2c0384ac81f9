"""Result serialisation: evaluation reports, CSV curves, SVG plots.

The SVG writer is deliberately small and dependency free; output is a
fixed-size line chart with axis ticks, suitable for the AR-vs-AN and
recall-vs-IoU curves.  All numeric text uses repr so files are byte
stable across runs.
"""

from __future__ import annotations

from typing import Sequence

from .errors import DataFormatError


def write_loss_csv(path, losses: Sequence[float]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(losses):
            fh.write("%d,%s\n" % (i, repr(float(v))))


def write_curve_csv(path, header: tuple[str, str],
                    points: Sequence[tuple[float, float]]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("%s,%s\n" % header)
        for x, y in points:
            xs = str(int(x)) if float(x) == int(x) and header[0] == "an" else repr(float(x))
            fh.write("%s,%s\n" % (xs, repr(float(y))))


def read_curve_csv(path) -> tuple[tuple[str, str], list[tuple[float, float]]]:
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if len(cols) != 2:
            raise DataFormatError("%s: expected a two-column CSV" % path)
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DataFormatError("%s:%d: expected two values"
                                      % (path, lineno))
            try:
                points.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise DataFormatError("%s:%d: %s" % (path, lineno, exc)) from exc
    return (cols[0], cols[1]), points


def write_report(path, entries: Sequence[tuple[str, object]]):
    """Key-value block, one ``key=value`` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in entries:
            if isinstance(value, float):
                value = repr(value)
            fh.write("%s=%s\n" % (key, value))


def _fmt(v: float) -> str:
    # Trim trailing zeros for tick labels; keep at most 3 decimals.
    s = "%.3f" % v
    s = s.rstrip("0").rstrip(".")
    return s if s else "0"


def line_chart_svg(points: Sequence[tuple[float, float]], title: str,
                   x_label: str, y_label: str) -> str:
    """Render one polyline as a standalone SVG document string."""
    if not points:
        raise ValueError("cannot plot an empty curve")
    width, height = 640, 420
    left, right, top, bottom = 70, 20, 40, 50
    plot_w = width - left - right
    plot_h = height - top - bottom
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    y_lo, y_hi = 0.0, 1.0
    if max(ys) > 1.0:
        y_hi = max(ys)

    def px(x: float) -> float:
        return left + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y: float) -> float:
        return top + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h

    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" '
        'viewBox="0 0 %d %d">' % (width, height, width, height),
        '<rect width="%d" height="%d" fill="white"/>' % (width, height),
        '<text x="%d" y="22" font-family="sans-serif" font-size="15" '
        'text-anchor="middle">%s</text>' % (width // 2, title),
    ]
    n_ticks = 5
    for i in range(n_ticks + 1):
        fx = x_lo + (x_hi - x_lo) * i / n_ticks
        fy = y_lo + (y_hi - y_lo) * i / n_ticks
        x = px(fx)
        y = py(fy)
        parts.append('<line x1="%.1f" y1="%d" x2="%.1f" y2="%d" '
                     'stroke="#dddddd"/>' % (x, top, x, top + plot_h))
        parts.append('<line x1="%d" y1="%.1f" x2="%d" y2="%.1f" '
                     'stroke="#dddddd"/>' % (left, y, left + plot_w, y))
        parts.append('<text x="%.1f" y="%d" font-family="sans-serif" '
                     'font-size="11" text-anchor="middle">%s</text>'
                     % (x, top + plot_h + 16, _fmt(fx)))
        parts.append('<text x="%d" y="%.1f" font-family="sans-serif" '
                     'font-size="11" text-anchor="end">%s</text>'
                     % (left - 6, y + 4, _fmt(fy)))
    parts.append('<rect x="%d" y="%d" width="%d" height="%d" fill="none" '
                 'stroke="#333333"/>' % (left, top, plot_w, plot_h))
    coords = " ".join("%.2f,%.2f" % (px(x), py(y)) for x, y in points)
    parts.append('<polyline points="%s" fill="none" stroke="#1f6fb2" '
                 'stroke-width="2"/>' % coords)
    parts.append('<text x="%d" y="%d" font-family="sans-serif" font-size="13" '
                 'text-anchor="middle">%s</text>'
                 % (left + plot_w // 2, height - 12, x_label))
    parts.append('<text x="16" y="%d" font-family="sans-serif" font-size="13" '
                 'text-anchor="middle" transform="rotate(-90 16 %d)">%s</text>'
                 % (top + plot_h // 2, top + plot_h // 2, y_label))
    parts.append('</svg>')
    return "\n".join(parts) + "\n"


def write_line_chart(path, points, title: str, x_label: str, y_label: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(line_chart_svg(points, title, x_label, y_label))
