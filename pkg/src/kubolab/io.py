"""Deterministic CSV/JSON/SVG emission, buffered so a failed run writes no tables."""
import csv
import io
import json
import math
import os
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

SCHEMA_VERSION = 1


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        if len(row) != len(columns):
            raise ValueError("row length does not match the header")
        w.writerow([_cell(x) for x in row])
    return buf.getvalue()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, complex):
        return {"re": _jsonable(x.real), "im": _jsonable(x.imag)}
    return x


def json_text(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def svg_plot(series, title="", xlabel="", ylabel="", logx=False, logy=False, width=480, height=320):
    """Self-contained SVG line plot; ``series`` maps a label to (xs, ys)."""
    def tx(v, log):
        return math.log10(v) if log else v

    pts = {}
    for label, (xs, ys) in series.items():
        pairs = [(tx(float(x), logx), tx(float(y), logy)) for x, y in zip(xs, ys)
                 if math.isfinite(x) and math.isfinite(y) and (not logx or x > 0) and (not logy or y > 0)]
        if pairs:
            pts[label] = pairs
    allx = [p[0] for v in pts.values() for p in v] or [0.0, 1.0]
    ally = [p[1] for v in pts.values() for p in v] or [0.0, 1.0]
    x0, x1 = min(allx), max(allx)
    y0, y1 = min(ally), max(ally)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    ml, mr, mt, mb = 60, 20, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + (1 - (y - y0) / (y1 - y0)) * ph

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle">{escape(title)}</text>',
           f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{escape(ylabel)}</text>']
    for v in (x0, x1):
        shown = 10 ** v if logx else v
        out.append(f'<text x="{px(v):.1f}" y="{mt + ph + 14}" text-anchor="middle">{shown:.3g}</text>')
    for v in (y0, y1):
        shown = 10 ** v if logy else v
        out.append(f'<text x="{ml - 4}" y="{py(v) + 4:.1f}" text-anchor="end">{shown:.3g}</text>')
    for i, (label, pairs) in enumerate(pts.items()):
        c = colors[i % len(colors)]
        path = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pairs)
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{path}"/>')
        for x, y in pairs:
            out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="2.5" fill="{c}"/>')
        out.append(f'<text x="{ml + 8}" y="{mt + 14 + 13 * i}" fill="{c}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


class ArtifactBuffer:
    """Collects named outputs in memory and writes them only on ``flush``."""

    def __init__(self, formats=("csv", "json")):
        self.formats = set(formats)
        self.files = {}

    def table(self, name, columns, rows):
        if "csv" in self.formats:
            self.files[f"{name}.csv"] = csv_text(columns, rows)

    def summary(self, name, obj):
        self.files[f"{name}.json"] = json_text(obj)

    def plot(self, name, series, **kw):
        if "svg" in self.formats:
            self.files[f"{name}.svg"] = svg_plot(series, **kw)

    def flush(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in sorted(self.files):
            tmp = d / (name + ".tmp")
            tmp.write_text(self.files[name], encoding="utf-8")
            os.replace(tmp, d / name)
        return sorted(self.files)
