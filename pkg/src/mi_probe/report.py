"""Byte-reproducible report emitters: JSON, CSV and a hand-written SVG line plot."""

from __future__ import annotations

import json
import math
from pathlib import Path

from .errors import UsageError
from .probe import LayerProbeReport

CSV_COLUMNS = ("layer", "side", "mean_mi", "log_mi", "n_samples", "flag")
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 30, 50


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_json(obj))


def report_csv(report: LayerProbeReport) -> str:
    lines = [f"# config_hash={report.config_hash}", ",".join(CSV_COLUMNS)]
    for side in sorted(report.curves):
        curve = report.curves[side]
        flags = curve.clamped or [False] * len(curve.layers)
        for layer, mean, logv, flag in zip(curve.layers, curve.per_layer_mean, curve.log_values, flags):
            lines.append(f"{layer},{side},{mean!r},{logv!r},{curve.n_samples},{'clamped' if flag else ''}")
    return "\n".join(lines) + "\n"


def write_csv(path, report: LayerProbeReport) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report_csv(report))


def read_csv(path) -> list:
    rows = [r for r in Path(path).read_text(encoding="utf-8").splitlines() if not r.startswith("#")]
    header = rows[0].split(",")
    if tuple(header) != CSV_COLUMNS:
        raise UsageError(f"{path}: unexpected CSV header {header}")
    return [dict(zip(header, r.split(","))) for r in rows[1:]]


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list:
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.floor(lo / step) * step
    ticks = []
    v = start
    while v <= hi + step * 0.5:
        ticks.append(round(v, 10))
        v += step
    return ticks


def curves_svg(series, title: str = "", y_label: str = "log MI (nats)", description: str = "") -> str:
    """One polyline per ``(label, layers, values)`` entry, integer ticks on the layer axis."""
    if not series:
        raise UsageError("nothing to plot")
    all_layers = [layer for _, layers, _ in series for layer in layers]
    all_values = [v for _, _, values in series for v in values]
    x_lo, x_hi = min(all_layers), max(all_layers)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    ticks = _nice_ticks(min(all_values), max(all_values))
    y_lo, y_hi = ticks[0], ticks[-1]
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(layer):
        return LEFT + (layer - x_lo) / (x_hi - x_lo) * pw

    def py(value):
        return TOP + (1 - (value - y_lo) / (y_hi - y_lo)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
        f'width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<desc>{_escape(description)}</desc>',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2 - RIGHT / 2:.1f}" y="18" text-anchor="middle">{_escape(title)}</text>',
        f'<line class="axis" x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line class="axis" x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
    ]
    for layer in range(int(x_lo), int(x_hi) + 1):
        x = px(layer)
        out.append(f'<line class="tick" x1="{x:.2f}" y1="{TOP + ph}" x2="{x:.2f}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{TOP + ph + 18}" text-anchor="middle">{layer}</text>')
    for tick in ticks:
        y = py(tick)
        out.append(f'<line class="tick" x1="{LEFT - 5}" y1="{y:.2f}" x2="{LEFT}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 8}" y="{y + 4:.2f}" text-anchor="end">{tick:g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle">layer</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {TOP + ph / 2:.1f})">{_escape(y_label)}</text>')
    for i, (label, layers, values) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(layer):.2f},{py(v):.2f}" for layer, v in zip(layers, values))
        out.append(f'<polyline class="curve" fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = TOP + 14 + 18 * i
        out.append(f'<line x1="{LEFT + pw + 12}" y1="{ly - 4}" x2="{LEFT + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 36}" y="{ly}">{_escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def report_series(report: LayerProbeReport, prefix: str = "") -> list:
    return [
        (f"{prefix}{side} [{report.trend_labels.get(side, '?')}]", curve.layers, curve.log_values)
        for side, curve in sorted(report.curves.items())
    ]


def write_svg(path, series, title: str = "", description: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(curves_svg(series, title, description=description))


def load_report(path) -> LayerProbeReport:
    return LayerProbeReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def write_report_artifacts(report: LayerProbeReport, out_dir, name: str = "report") -> dict:
    """Write ``report.json``, ``curves.csv`` and ``curves.svg``; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "csv": out / "curves.csv", "svg": out / "curves.svg"}
    write_json(paths["json"], report.to_json())
    write_csv(paths["csv"], report)
    if report.curves:
        write_svg(paths["svg"], report_series(report), title=f"{name}: log MI vs depth",
                  description=f"config_hash={report.config_hash}")
    return paths


def compare_runs(report_paths, out_dir=None, side: str = "input_side"):
    """Side-by-side trend labels and an overlay plot for two or more reports.

    Returns ``(rows, differs)``; with ``out_dir`` also writes ``comparison.csv``
    and ``overlay.svg``.
    """
    if len(report_paths) < 2:
        raise UsageError("compare needs at least two reports")
    loaded = []
    for path in report_paths:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        loaded.append((Path(path), raw, LayerProbeReport.from_json(raw)))
    conventions = {raw.get("tap_convention") for _, raw, _ in loaded}
    if len(conventions) != 1:
        raise UsageError(f"reports use different layer conventions: {sorted(map(str, conventions))}")
    layer_counts = set()
    for path, _, rep in loaded:
        if side not in rep.curves:
            raise UsageError(f"{path}: no {side} curve")
        layer_counts.add(len(rep.curves[side].layers))
    if len(layer_counts) != 1:
        raise UsageError(f"reports have different layer counts: {sorted(layer_counts)}")

    rows = []
    for i, (path, raw, rep) in enumerate(loaded):
        name = rep.meta.get("experiment") or path.parent.name or path.stem
        rows.append({
            "index": i,
            "name": str(name),
            "path": str(path),
            "trend_label": rep.trend_labels.get(side, "other"),
            "log_values": list(rep.curves[side].log_values),
        })
    differs = len({r["trend_label"] for r in rows}) > 1

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["index,name,trend_label,differs," + ",".join(f"log_mi_{l}" for l in loaded[0][2].curves[side].layers)]
        for r in rows:
            vals = ",".join(repr(v) for v in r["log_values"])
            lines.append(f"{r['index']},{r['name']},{r['trend_label']},{int(differs)},{vals}")
        with open(out / "comparison.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        series = [(f"{r['index']}: {r['name']} [{r['trend_label']}]", rep.curves[side].layers, r["log_values"])
                  for r, (_, _, rep) in zip(rows, loaded)]
        hashes = " ".join(rep.config_hash for _, _, rep in loaded)
        write_svg(out / "overlay.svg", series, title=f"{side} log MI" + (" (labels differ)" if differs else ""),
                  description=f"config_hash={hashes}")
    return rows, differs
