"""Report and plot emission: JSON, long-form CSV, markdown tables, SVG curves.

All outputs are deterministic byte-for-byte given the same report: keys are
sorted, floats use repr (shortest round-trip form), and the SVG carries no
timestamps or external assets.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .attacks import DISPLAY_NAMES
from .evaluate import EvalReport, SweepResult

__all__ = [
    "emit_plot",
    "emit_report",
    "load_report",
    "load_sweep_rows",
    "markdown_table",
    "sweep_csv",
]

REPORT_CSV_HEADER = ["attack", "fold", "source_auc", "target_auc",
                     "target_advtrain_auc", "success_rate"]
SWEEP_CSV_HEADER = ["attack", "epsilon", "iterations", "defended", "fold", "auc"]


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"


def load_report(path) -> EvalReport:
    with open(path, "r", encoding="utf-8") as fh:
        return EvalReport.from_json_dict(json.load(fh))


def report_csv(report: EvalReport) -> str:
    """Long-form CSV: one row per (attack, fold), clean AUCs under 'none'."""
    lines = [",".join(REPORT_CSV_HEADER)]
    for f in report.folds:
        lines.append(",".join([
            "none", str(f.fold), _fmt(f.clean["source"]), _fmt(f.clean["target"]),
            _fmt(f.clean.get("target_advtrain")), "",
        ]))
        for name in sorted(f.attacks):
            entry = f.attacks[name]
            lines.append(",".join([
                name, str(f.fold), _fmt(entry["source_auc"]), _fmt(entry["target_auc"]),
                _fmt(entry.get("target_advtrain_auc")), _fmt(entry["success_rate"]),
            ]))
    return "\n".join(lines) + "\n"


def _cell(stats) -> str:
    return f"{stats['mean']:.3f} ± {stats['std']:.3f}"


def markdown_table(report: EvalReport) -> str:
    """Mean ± std per attack, one column per evaluated model."""
    defended = "target_advtrain" in report.summary["clean"]
    header = ["Attack Method", "Source Model", "Target Model"]
    if defended:
        header.append("Target Model (Adversarial Training)")
    rows = []
    clean = report.summary["clean"]
    row = ["No Adversarial Attack", _cell(clean["source"]), _cell(clean["target"])]
    if defended:
        row.append(_cell(clean["target_advtrain"]))
    rows.append(row)
    order = [a["attack"] for a in report.config.get("attacks", [])] or sorted(
        report.summary["attacks"])
    for name in order:
        entry = report.summary["attacks"][name]
        row = [DISPLAY_NAMES.get(name, name),
               _cell(entry["source_auc"]), _cell(entry["target_auc"])]
        if defended:
            row.append(_cell(entry["target_advtrain_auc"]))
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"
    out = [line(header), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    out.extend(line(r) for r in rows)
    return "\n".join(out) + "\n"


def emit_report(report: EvalReport, out_dir, formats=("json", "csv", "markdown"),
                basename: str = "report") -> list:
    """Write the report in the requested formats; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    emitters = {
        "json": (".json", report_json),
        "csv": (".csv", report_csv),
        "markdown": (".md", markdown_table),
    }
    for fmt in formats:
        if fmt not in emitters:
            raise ValueError(f"unknown report format {fmt!r}")
        suffix, render = emitters[fmt]
        path = out_dir / (basename + suffix)
        path.write_text(render(report), encoding="utf-8")
        written.append(path)
    return written


def sweep_csv(sweep: SweepResult) -> str:
    lines = [",".join(SWEEP_CSV_HEADER)]
    for row in sweep.long_rows():
        lines.append(",".join([
            row["attack"], _fmt(row["epsilon"]), str(row["iterations"]),
            str(row["defended"]), str(row["fold"]), _fmt(row["auc"]),
        ]))
    return "\n".join(lines) + "\n"


def load_sweep_rows(path) -> list:
    """Parse a sweep CSV back into row dicts (for re-plotting)."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SWEEP_CSV_HEADER:
            raise ValueError(f"{path}: bad sweep header {header!r}")
        rows = []
        for row in reader:
            rows.append({
                "attack": row[0], "epsilon": float(row[1]), "iterations": int(row[2]),
                "defended": int(row[3]), "fold": int(row[4]), "auc": float(row[5]),
            })
    return rows


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f"]

_WIDTH, _HEIGHT = 640, 440
_ML, _MR, _MT, _MB = 70, 170, 30, 50


def _ticks(lo, hi, n=5):
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def emit_plot(rows, axis: str, path, defended: int = 0) -> Path:
    """Render one AUC-vs-parameter polyline per attack as standalone SVG.

    ``rows`` are sweep rows (as from ``SweepResult.long_rows`` or
    ``load_sweep_rows``); fold values are averaged per (attack, x). The other
    sweep axis must be constant across the plotted rows.
    """
    if axis not in ("epsilon", "iterations"):
        raise ValueError(f"axis must be 'epsilon' or 'iterations', got {axis!r}")
    other = "iterations" if axis == "epsilon" else "epsilon"
    rows = [r for r in rows if r.get("defended", 0) == defended]
    if not rows:
        raise ValueError("no sweep rows to plot")
    other_vals = sorted({r[other] for r in rows})
    if len(other_vals) > 1:
        raise ValueError(f"plot needs a single {other} slice, found {other_vals}")
    xs = sorted({r[axis] for r in rows})
    if len(xs) < 2:
        raise ValueError(f"need >= 2 points along {axis}, found {len(xs)}")
    attacks = sorted({r["attack"] for r in rows})
    series = {}
    for name in attacks:
        ys = []
        for x in xs:
            vals = [r["auc"] for r in rows if r["attack"] == name and r[axis] == x]
            ys.append(float(np.mean(vals)))
        series[name] = ys

    x_lo, x_hi = min(xs), max(xs)
    all_y = [y for ys in series.values() for y in ys]
    y_lo, y_hi = min(all_y), max(all_y)
    if y_hi - y_lo < 1e-9:
        y_lo, y_hi = y_lo - 0.05, y_hi + 0.05
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = max(0.0, y_lo - pad), min(1.0, y_hi + pad)

    def sx(v):
        return _ML + (v - x_lo) / (x_hi - x_lo) * (_WIDTH - _ML - _MR)

    def sy(v):
        return _HEIGHT - _MB - (v - y_lo) / (y_hi - y_lo) * (_HEIGHT - _MT - _MB)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<line x1="{_ML}" y1="{_HEIGHT - _MB}" x2="{_WIDTH - _MR}" '
        f'y2="{_HEIGHT - _MB}" stroke="black"/>',
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_HEIGHT - _MB}" stroke="black"/>',
    ]
    for tick in _ticks(x_lo, x_hi):
        px = sx(tick)
        parts.append(f'<line x1="{px:.2f}" y1="{_HEIGHT - _MB}" x2="{px:.2f}" '
                     f'y2="{_HEIGHT - _MB + 5}" stroke="black"/>')
        parts.append(f'<text x="{px:.2f}" y="{_HEIGHT - _MB + 18}" font-size="11" '
                     f'text-anchor="middle">{tick:.3g}</text>')
    for tick in _ticks(y_lo, y_hi):
        py = sy(tick)
        parts.append(f'<line x1="{_ML - 5}" y1="{py:.2f}" x2="{_ML}" '
                     f'y2="{py:.2f}" stroke="black"/>')
        parts.append(f'<text x="{_ML - 8}" y="{py + 4:.2f}" font-size="11" '
                     f'text-anchor="end">{tick:.3f}</text>')
    parts.append(f'<text x="{(_ML + _WIDTH - _MR) / 2}" y="{_HEIGHT - 12}" '
                 f'font-size="13" text-anchor="middle">{axis}</text>')
    parts.append(f'<text x="18" y="{(_MT + _HEIGHT - _MB) / 2}" font-size="13" '
                 f'text-anchor="middle" transform="rotate(-90 18 '
                 f'{(_MT + _HEIGHT - _MB) / 2})">target AUC</text>')
    for i, name in enumerate(attacks):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, series[name]))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.8"/>')
        ly = _MT + 16 + 18 * i
        lx = _WIDTH - _MR + 12
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="1.8"/>')
        parts.append(f'<text x="{lx + 28}" y="{ly}" font-size="11">'
                     f'{DISPLAY_NAMES.get(name, name)}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return path
