"""Evaluation report files.

``report.json`` holds every metric plus a config echo; ``table_*.csv`` hold the
component, decode-mode and selective-prediction tables; ``hist_<var>.csv`` dump
the marginal histograms for external plotting; ``report.md`` is a readable
summary. Rendering is deterministic: same inputs, same bytes.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import jsonschema
import numpy as np

from .metrics import BIN_EDGES, COMPONENTS, VARIABLES

MODE_COLUMNS = tuple(f"{var}_{m}" for var in VARIABLES for m in ("w1", "jsd", "tvd"))

_num_or_null = {"type": ["number", "null"]}
_marginal = {
    "type": "object",
    "required": ["w1", "jsd", "tvd"],
    "properties": {"w1": {"type": "number", "minimum": 0}, "jsd": {"type": "number", "minimum": 0, "maximum": 1},
                   "tvd": {"type": "number", "minimum": 0, "maximum": 1}},
}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "metadata", "component_accuracy", "modes", "hist_pearson", "decode_stats", "selective"],
    "properties": {
        "schema_version": {"const": 1},
        "metadata": {
            "type": "object",
            "required": ["jsd_log_base", "binning", "config"],
            "properties": {"jsd_log_base": {"const": 2}},
        },
        "component_accuracy": {
            "type": "object",
            "properties": {c: {"type": "number", "minimum": 0, "maximum": 1} for c in COMPONENTS},
        },
        "modes": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "properties": {v: _marginal for v in VARIABLES},
                "required": list(VARIABLES),
            },
        },
        "hist_pearson": {"type": "object", "additionalProperties": {"type": "object", "additionalProperties": _num_or_null}},
        "decode_stats": {"type": "object"},
        "selective": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["threshold", "macro_f1", "coverage"],
                    "properties": {
                        "threshold": {"type": "number"},
                        "macro_f1": _num_or_null,
                        "coverage": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                },
            },
        },
    },
}


def empty_report(config: dict | None = None) -> dict:
    return {
        "schema_version": 1,
        "metadata": {
            "jsd_log_base": 2,
            "binning": {k: {"start": float(e[0]), "stop": float(e[-1]), "width": float(e[1] - e[0])} for k, e in BIN_EDGES.items()},
            "config": config or {},
        },
        "component_accuracy": {},
        "modes": {},
        "hist_pearson": {},
        "decode_stats": {},
        "selective": {},
    }


def validate_report(report: dict) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6g}"


def write_report(report: dict, out_dir, histograms: dict[str, dict[str, np.ndarray]] | None = None) -> list[Path]:
    """Write all report files into ``out_dir`` and return their paths."""
    validate_report(report)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json", out / "table_components.csv", out / "table_modes.csv", out / "table_selective.csv"]
    paths[0].write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    acc = report["component_accuracy"]
    _write_csv(paths[1], ("component", "accuracy"), [(c, acc[c]) for c in COMPONENTS if c in acc])
    _write_csv(
        paths[2],
        ("mode",) + MODE_COLUMNS,
        [
            (mode,) + tuple(cells[var][m] for var in VARIABLES for m in ("w1", "jsd", "tvd"))
            for mode, cells in report["modes"].items()
        ],
    )
    _write_csv(
        paths[3],
        ("horizon", "threshold", "macro_f1", "coverage"),
        [
            (h, r["threshold"], "" if r["macro_f1"] is None else r["macro_f1"], r["coverage"])
            for h, rows in sorted(report["selective"].items(), key=lambda kv: int(kv[0]))
            for r in rows
        ],
    )
    for var, series in (histograms or {}).items():
        edges = BIN_EDGES[var]
        names = sorted(series)
        path = out / f"hist_{var}.csv"
        _write_csv(
            path,
            ("bin_lo", "bin_hi") + tuple(names),
            [(edges[i], edges[i + 1]) + tuple(int(series[n][i]) for n in names) for i in range(len(edges) - 1)],
        )
        paths.append(path)

    md = out / "report.md"
    md.write_text(render_markdown(report))
    paths.append(md)
    return paths


def render_markdown(report: dict) -> str:
    lines = ["# Evaluation report", ""]
    acc = report["component_accuracy"]
    lines += ["## Component accuracy", "", "| component | accuracy |", "|---|---|"]
    lines += [f"| {c} | {acc[c]:.4f} |" for c in COMPONENTS if c in acc]
    lines += ["", "## Decode modes", "", "| mode | " + " | ".join(MODE_COLUMNS) + " |", "|---" * (len(MODE_COLUMNS) + 1) + "|"]
    for mode, cells in report["modes"].items():
        vals = [_fmt(cells[var][m]) for var in VARIABLES for m in ("w1", "jsd", "tvd")]
        lines.append(f"| {mode} | " + " | ".join(vals) + " |")
    lines += ["", "## Selective prediction", "", "| horizon | threshold | macro F1 | coverage |", "|---|---|---|---|"]
    for h, rows in sorted(report["selective"].items(), key=lambda kv: int(kv[0])):
        lines += [f"| {h} | {r['threshold']:.1f} | {_fmt(r['macro_f1'])} | {r['coverage']:.4f} |" for r in rows]
    return "\n".join(lines) + "\n"
