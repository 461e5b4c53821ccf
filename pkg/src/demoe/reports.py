"""Report emission: JSON, CSV, and aligned text tables with identical values.

Field order follows the first record's insertion order and is stable. Floats
are written with ``repr`` in every format, so JSON and CSV carry the same
values digit for digit (infinities appear as ``Infinity`` / ``inf`` and parse
back equal).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

__all__ = ["aggregate_mean", "emit_json", "emit_csv", "emit_table", "emit_report"]


class EmptyReportError(ValueError):
    pass


def _fields(records) -> list[str]:
    if not records:
        raise EmptyReportError("no records to report")
    return list(records[0].keys())


def aggregate_mean(records) -> dict:
    """Double-precision mean of every numeric field (bools excluded)."""
    fields = _fields(records)
    agg = {}
    for f in fields:
        vals = [r[f] for r in records]
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            agg[f] = float(np.mean([float(v) for v in vals]))
    return agg


def emit_json(records, path, aggregate=None) -> None:
    obj = {"records": records}
    if aggregate is not None:
        obj["aggregate"] = aggregate
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_csv(records, path, aggregate=None) -> None:
    fields = _fields(records)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for r in records:
            writer.writerow([_cell(r[f]) for f in fields])
        if aggregate is not None:
            writer.writerow([_cell(aggregate[f]) if f in aggregate else "mean" for f in fields])


def emit_table(records, aggregate=None) -> str:
    fields = _fields(records)
    rows = [[_cell(r[f]) for f in fields] for r in records]
    if aggregate is not None:
        rows.append([_cell(aggregate[f]) if f in aggregate else "mean" for f in fields])
    widths = [max(len(f), *(len(row[i]) for row in rows)) for i, f in enumerate(fields)]
    lines = [
        "  ".join(f.ljust(widths[i]) for i, f in enumerate(fields)),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines) + "\n"


def emit_report(records, fmt: str, path, aggregate=None):
    """Write records in one of {json, csv, table}."""
    if fmt == "json":
        emit_json(records, path, aggregate)
    elif fmt == "csv":
        emit_csv(records, path, aggregate)
    elif fmt == "table":
        Path(path).write_text(emit_table(records, aggregate))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
