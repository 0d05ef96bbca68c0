"""Versioned results documents and their CSV / Markdown rendering.

A results document is one JSON object::

    {"schema_version": 1, "meta": {...}, "config": {...},
     "tables": {"methods": [MethodResult, ...], ...}, "curves": {...}}

where each MethodResult holds ``method``, ``clean_accuracy``,
``corruption_accuracy``, ``ece``, ``ece_rescaled``, ``temperature`` and
``errors`` (kind -> five error rates, severities 1..5).
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .corruptions import CorruptedSet
from .data import Dataset
from .metrics import (
    SEVERITIES,
    accuracy,
    avg_corruption_accuracy,
    corruption_table,
    logits_of,
    model_ece,
    temperature_rescale,
)

SCHEMA_VERSION = 1
COLUMNS = ["method", "kind", "severity", "accuracy", "clean_accuracy", "corruption_accuracy", "ece", "ece_rescaled",
           "temperature"]
SUMMARY = "summary"
_SUMMARY_FIELDS = ["clean_accuracy", "corruption_accuracy", "ece", "ece_rescaled", "temperature"]


class ReportError(ValueError):
    """Results document does not follow the schema."""


def corruption_ece(model, corrupted: CorruptedSet, t: float = 1.0) -> float:
    """Mean ECE over the (kind, severity) cells."""
    labels = corrupted.clean.labels
    return float(np.mean([model_ece(model, imgs, labels, t) for imgs in corrupted.cells.values()]))


def summarize_model(method: str, model, clean: Dataset, corrupted: CorruptedSet | None = None) -> dict:
    """One MethodResult; the temperature is fitted on ``clean`` only."""
    t, _ = temperature_rescale(logits_of(model, clean.images), clean.labels)
    out: dict[str, Any] = {"method": method, "clean_accuracy": accuracy(model, clean), "temperature": t}
    if corrupted is not None and corrupted.cells:
        table = corruption_table(model, corrupted, clean)
        out["corruption_accuracy"] = avg_corruption_accuracy(table)
        out["ece"] = corruption_ece(model, corrupted)
        out["ece_rescaled"] = corruption_ece(model, corrupted, t)
        out["errors"] = table.errors
    else:
        out["ece"] = model_ece(model, clean.images, clean.labels)
        out["ece_rescaled"] = model_ece(model, clean.images, clean.labels, t)
        out["corruption_accuracy"] = None
        out["errors"] = {}
    return out


def make_results(methods: list[dict], meta: Mapping | None = None, config: Mapping | None = None,
                 curves: Mapping | None = None, **tables) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "meta": dict(meta or {}),
        "config": dict(config or {}),
        "tables": {"methods": list(methods), **tables},
        "curves": dict(curves or {}),
    }
    validate_results(doc)
    return doc


def _number_or_none(v, where: str) -> None:
    if v is not None and not isinstance(v, (int, float)):
        raise ReportError(f"{where} must be a number or null")


def validate_results(doc: Any) -> None:
    if not isinstance(doc, Mapping):
        raise ReportError("results must be a JSON object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ReportError(f"schema_version must be {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")
    for key in ("meta", "config", "tables", "curves"):
        if not isinstance(doc.get(key, {}), Mapping):
            raise ReportError(f"{key} must be an object")
    methods = doc.get("tables", {}).get("methods", [])
    if not isinstance(methods, list):
        raise ReportError("tables.methods must be a list")
    for i, m in enumerate(methods):
        if not isinstance(m, Mapping) or not isinstance(m.get("method"), str):
            raise ReportError(f"tables.methods[{i}] needs a string 'method'")
        for f in _SUMMARY_FIELDS:
            _number_or_none(m.get(f), f"tables.methods[{i}].{f}")
        errors = m.get("errors", {})
        if not isinstance(errors, Mapping):
            raise ReportError(f"tables.methods[{i}].errors must be an object")
        for kind, row in errors.items():
            if not isinstance(row, list) or len(row) != len(SEVERITIES):
                raise ReportError(f"tables.methods[{i}].errors[{kind!r}] must list {len(SEVERITIES)} error rates")
            for e in row:
                _number_or_none(e, f"tables.methods[{i}].errors[{kind!r}]")


def load_results(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: not valid JSON ({exc})") from exc
    validate_results(doc)
    return doc


def save_results(doc: Mapping, path: str | Path) -> None:
    validate_results(doc)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def _fmt(v) -> str:
    return "" if v is None else f"{float(v):.6f}"


def report_rows(doc: Mapping) -> list[list[str]]:
    """Breakdown rows per (method, kind, severity), then one summary row per method."""
    validate_results(doc)
    methods = doc.get("tables", {}).get("methods", [])
    rows = []
    for m in methods:
        for kind, row in m.get("errors", {}).items():
            for s, e in zip(SEVERITIES, row):
                rows.append([m["method"], kind, str(s), _fmt(None if e is None else 1.0 - e), "", "", "", "", ""])
    for m in methods:
        rows.append([m["method"], SUMMARY, "", ""] + [_fmt(m.get(f)) for f in _SUMMARY_FIELDS])
    return rows


def emit_report(doc: Mapping, fmt: str = "csv") -> str:
    rows = report_rows(doc)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        w.writerows(rows)
        return buf.getvalue()
    if fmt == "md":
        lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ReportError(f"unknown report format {fmt!r}; use csv or md")


def parse_csv_report(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))
