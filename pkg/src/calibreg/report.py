"""Byte-stable JSON / CSV / SVG emission of evaluation reports."""

from __future__ import annotations

import csv
import json
import math
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import EvaluationReport, ReliabilityCurve

SCHEMA_VERSION = 1
CSV_HEADER = ("dataset", "model", "method", "seed", "metric", "value")


def jsonable(obj):
    """Recursively convert to JSON-safe values; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def report_document(reports: Sequence[EvaluationReport], failures: Sequence[dict] = (), config: dict | None = None) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "reports": [r.to_dict() for r in reports],
        "failures": list(failures),
    }
    if config is not None:
        doc["config"] = config
    return doc


def _format_value(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def csv_rows(reports: Iterable[EvaluationReport]) -> list[tuple]:
    rows = []
    for r in reports:
        for metric in EvaluationReport.METRICS:
            rows.append((r.dataset, r.model, r.method, r.seed, metric, _format_value(r.metric(metric))))
    return rows


def write_json(path, reports, failures=(), config=None) -> Path:
    path = Path(path)
    path.write_text(dumps(report_document(reports, failures, config)))
    return path


def write_csv(path, reports) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(csv_rows(reports))
    return path


def write_reliability_csv(path, reports) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("dataset", "model", "method", "seed", "alpha", "empirical", "band_low", "band_high"))
        for r in reports:
            for a, e, lo, hi in r.reliability.to_csv_rows():
                w.writerow((r.dataset, r.model, r.method, r.seed, repr(a), repr(e), _format_value(lo), _format_value(hi)))
    return path


def reliability_svg(curve: ReliabilityCurve, title: str = "", size: int = 320, margin: int = 40) -> str:
    """Reliability diagram: diagonal, consistency band polygon and empirical polyline."""
    span = size - 2 * margin

    def pt(a: float, f: float) -> str:
        return f"{margin + a * span:.3f},{margin + (1.0 - f) * span:.3f}"

    grid = curve.grid.tolist()
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" fill="none" stroke="#444"/>',
    ]
    if curve.band_low is not None:
        outline = [pt(a, f) for a, f in zip(grid, curve.band_low.tolist())]
        outline += [pt(a, f) for a, f in zip(reversed(grid), reversed(curve.band_high.tolist()))]
        parts.append(f'<polygon class="band" points="{" ".join(outline)}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>')
    parts.append(f'<line class="diagonal" x1="{margin}" y1="{margin + span}" x2="{margin + span}" y2="{margin}" stroke="#888" stroke-dasharray="4 3"/>')
    line = " ".join(pt(a, f) for a, f in zip(grid, curve.empirical.tolist()))
    parts.append(f'<polyline class="empirical" points="{line}" fill="none" stroke="#d62728" stroke-width="1.5"/>')
    parts.append(f'<text x="{size / 2:.1f}" y="{size - 8}" text-anchor="middle" font-size="12">quantile level</text>')
    parts.append(f'<text x="12" y="{size / 2:.1f}" font-size="12" transform="rotate(-90 12 {size / 2:.1f})" text-anchor="middle">empirical PIT CDF</text>')
    if title:
        parts.append(f'<text x="{size / 2:.1f}" y="20" text-anchor="middle" font-size="13">{_escape(title)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in s)


def write_svgs(directory, reports) -> list[Path]:
    directory = Path(directory)
    paths = []
    for r in reports:
        name = f"reliability_{_slug(r.dataset)}_{_slug(r.model)}_{_slug(r.method)}_seed{r.seed}.svg"
        path = directory / name
        path.write_text(reliability_svg(r.reliability, f"{r.dataset} {r.model} {r.method} seed {r.seed}"))
        paths.append(path)
    return paths


def emit_report(reports: Sequence[EvaluationReport], fmt: str, out_dir, failures=(), config=None) -> list[Path]:
    """Write reports in ``fmt`` (json, csv or svg) into ``out_dir``."""
    if not reports:
        raise ValueError("no reports to emit")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        return [write_json(out_dir / "report.json", reports, failures, config)]
    if fmt == "csv":
        return [write_csv(out_dir / "report.csv", reports), write_reliability_csv(out_dir / "reliability.csv", reports)]
    if fmt == "svg":
        return write_svgs(out_dir, reports)
    raise ValueError(f"unknown report format {fmt!r}")


def _float(v):
    if isinstance(v, str):
        return float(v)
    return v


def reports_from_document(doc: dict) -> list[EvaluationReport]:
    out = []
    for d in doc["reports"]:
        rel = d["reliability"]
        curve = ReliabilityCurve(
            np.array(rel["alpha"], dtype=np.float64),
            np.array(rel["empirical"], dtype=np.float64),
            np.array(rel["band_low"], dtype=np.float64) if "band_low" in rel else None,
            np.array(rel["band_high"], dtype=np.float64) if "band_high" in rel else None,
        )
        fields = {k: _float(v) if k in ("pce", "crps", "nll", "std", "p_value", "selected_lambda") else v for k, v in d.items()}
        fields["reliability"] = curve
        out.append(EvaluationReport(**fields))
    return out


def read_json(path) -> tuple[list[EvaluationReport], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {doc.get('schema_version')!r}")
    return reports_from_document(doc), doc
