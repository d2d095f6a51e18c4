"""COMP trajectories: recording, between-layer deltas, smoothed derivatives,
and CSV / JSON / SVG export."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

DEFAULT_WINDOW = 10


class TraceError(ValueError):
    pass


def fmt(value: float) -> str:
    """Shortest text that parses back to the same double."""
    return repr(float(value))


@dataclass
class CompTrace:
    layer_id: str
    steps: list = field(default_factory=list)
    comps: list = field(default_factory=list)
    check_monotone: bool = False

    def __len__(self):
        return len(self.steps)

    def record(self, step: int, comp: float) -> "CompTrace":
        if self.steps and step <= self.steps[-1]:
            raise TraceError(f"{self.layer_id}: step {step} does not follow {self.steps[-1]}")
        if self.check_monotone and self.comps and comp < self.comps[-1]:
            raise TraceError(f"{self.layer_id}: COMP decreased at step {step}")
        self.steps.append(int(step))
        self.comps.append(float(comp))
        return self

    @property
    def samples(self):
        return list(zip(self.steps, self.comps))


def record(trace: CompTrace, step: int, comp: float) -> CompTrace:
    return trace.record(step, comp)


def delta_trace(a: CompTrace, b: CompTrace):
    """``(steps, comp_b - comp_a)`` over the steps both traces share."""
    where_a = {s: c for s, c in zip(a.steps, a.comps)}
    shared = [s for s in b.steps if s in where_a]
    if not shared:
        raise TraceError(f"traces {a.layer_id} and {b.layer_id} share no steps")
    where_b = dict(zip(b.steps, b.comps))
    return shared, [where_b[s] - where_a[s] for s in shared]


def smoothed_derivative(values, order: int, window: int = DEFAULT_WINDOW):
    """Moving average over ``window`` samples, then forward differences of ``order``.

    The result has ``len(values) - order * window`` entries: the valid moving
    average drops ``window - 1`` and each difference one more, and the
    remaining ``(order - 1) * (window - 1)`` trailing entries are trimmed so
    that first and second derivatives of one trace align on shared steps.
    """
    if isinstance(values, CompTrace):
        values = values.comps
    values = np.asarray(values, dtype=np.float64)
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if window < 1:
        raise ValueError("window must be positive")
    length = len(values) - order * window
    if length <= 0:
        raise TraceError(f"trace of length {len(values)} too short for order {order}, "
                         f"window {window}")
    smooth = np.convolve(values, np.ones(window) / window, mode="valid")
    return np.diff(smooth, n=order)[:length]


@dataclass
class TraceReport:
    traces: list
    deltas: list = field(default_factory=list)       # ((layer_a, layer_b), steps, values)
    derivatives: dict = field(default_factory=dict)  # layer_id -> {1: [...], 2: [...]}
    window: int = DEFAULT_WINDOW

    @property
    def sorted_traces(self):
        return sorted(self.traces, key=lambda t: t.layer_id)


def build_report(traces, window: int = DEFAULT_WINDOW) -> TraceReport:
    """Deltas between consecutive layers (by layer id) plus smoothed derivatives."""
    ordered = sorted(traces, key=lambda t: t.layer_id)
    report = TraceReport(list(ordered), window=window)
    for a, b in zip(ordered, ordered[1:]):
        steps, values = delta_trace(a, b)
        report.deltas.append(((a.layer_id, b.layer_id), steps, values))
    for t in ordered:
        derivs = {}
        for order in (1, 2):
            if len(t) > order * window:
                derivs[order] = smoothed_derivative(t.comps, order, window).tolist()
        report.derivatives[t.layer_id] = derivs
    return report


def traces_to_csv(traces) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "layer_id", "comp"])
    for t in sorted(traces, key=lambda t: t.layer_id):
        for s, c in zip(t.steps, t.comps):
            writer.writerow([s, t.layer_id, fmt(c)])
    return buf.getvalue()


def traces_from_csv(text: str):
    traces = {}
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != ["step", "layer_id", "comp"]:
        raise TraceError(f"unexpected trace CSV header {reader.fieldnames}")
    for row in reader:
        t = traces.setdefault(row["layer_id"], CompTrace(row["layer_id"]))
        t.record(int(row["step"]), float(row["comp"]))
    return [traces[k] for k in sorted(traces)]


def report_to_json(report: TraceReport) -> str:
    def nums(xs):
        return [float(x) for x in xs]

    doc = {
        "window": report.window,
        "traces": [{"layer_id": t.layer_id, "steps": list(t.steps), "comp": nums(t.comps)}
                   for t in report.sorted_traces],
        "deltas": [{"layers": list(pair), "steps": list(steps), "delta": nums(vals)}
                   for pair, steps, vals in report.deltas],
        "derivatives": {k: {str(o): nums(v) for o, v in sorted(d.items())}
                        for k, d in sorted(report.derivatives.items())},
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def report_from_json(text: str) -> TraceReport:
    doc = json.loads(text)
    traces = [CompTrace(t["layer_id"], list(t["steps"]), list(t["comp"])) for t in doc["traces"]]
    deltas = [(tuple(d["layers"]), d["steps"], d["delta"]) for d in doc["deltas"]]
    derivs = {k: {int(o): v for o, v in d.items()} for k, d in doc["derivatives"].items()}
    return TraceReport(traces, deltas, derivs, doc["window"])


def export_report(report: TraceReport, fmt_name: str, path) -> Path:
    path = Path(path)
    if fmt_name == "csv":
        text = traces_to_csv(report.traces)
    elif fmt_name == "json":
        text = report_to_json(report)
    else:
        raise ValueError(f"unknown export format {fmt_name!r}")
    path.write_text(text)
    return path


def _nice_ticks(lo, hi, count=5):
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-12 * abs(hi):
        ticks.append(round(t, 12))
        t += step
    return ticks


PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def render_svg(series, title="", x_label="step", y_label="COMP",
               width=640, height=400) -> str:
    """``series`` is a list of ``(name, xs, ys)``; returns a standalone SVG."""
    series = [(n, list(xs), list(ys)) for n, xs, ys in series if len(xs)]
    if not series:
        raise TraceError("nothing to plot")
    all_x = [x for _, xs, _ in series for x in xs]
    all_y = [y for _, _, ys in series for y in ys]
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y), max(all_y)
    x_pad = (x_hi - x_lo) * 0.05 or 0.5
    y_pad = (y_hi - y_lo) * 0.05 or 0.5
    x_lo, x_hi, y_lo, y_hi = x_lo - x_pad, x_hi + x_pad, y_lo - y_pad, y_hi + y_pad
    left, right, top, bottom = 70, 20, 30, 50
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return top + (y_hi - y) / (y_hi - y_lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">'
           f'{escape(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in _nice_ticks(x_lo, x_hi):
        out.append(f'<line x1="{px(t):.2f}" y1="{top + ph}" x2="{px(t):.2f}" '
                   f'y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px(t):.2f}" y="{top + ph + 18}" text-anchor="middle" '
                   f'font-size="11">{t:g}</text>')
    for t in _nice_ticks(y_lo, y_hi):
        out.append(f'<line x1="{left - 5}" y1="{py(t):.2f}" x2="{left}" y2="{py(t):.2f}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py(t) + 4:.2f}" text-anchor="end" '
                   f'font-size="11">{t:g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" '
               f'font-size="12">{escape(x_label)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(y_label)}</text>')
    for i, (name, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                   f'points="{points}"/>')
        ly = top + 14 + 16 * i
        out.append(f'<line x1="{left + 10}" y1="{ly}" x2="{left + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + 35}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_svg_lineplot(report: TraceReport, path, title="COMP over training", **options) -> Path:
    series = [(t.layer_id, t.steps, t.comps) for t in report.sorted_traces]
    path = Path(path)
    path.write_text(render_svg(series, title=title, **options))
    return path
