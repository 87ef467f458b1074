"""Delimited output with commented key=value headers, plus matching readers.

Every emitted file starts with '#'-prefixed header lines (run metadata:
config fields, seed), then a column-name line, then comma-separated rows.
Floats are written with 17 significant digits so files are reproducible
bit-for-bit under a fixed seed and round-trip without loss.
"""

from __future__ import annotations

import csv
import io as _io
from pathlib import Path

import numpy as np


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if isinstance(v, np.integer):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def parse_value(s: str):
    if s == "":
        return None
    if s == "true":
        return True
    if s == "false":
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def write_csv(path, rows, header=None, columns=None):
    """Write rows (list of dicts) with a commented key=value header block."""
    path = Path(path)
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = _io.StringIO()
    for k, v in (header or {}).items():
        buf.write(f"# {k}={format_value(v)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([format_value(row.get(c)) for c in columns])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def read_csv(path):
    """Read a file written by write_csv; returns (header dict, row dicts)."""
    header = {}
    rows = []
    columns = None
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    header[k.strip()] = parse_value(v.strip())
                continue
            cells = next(csv.reader([line]))
            if columns is None:
                columns = cells
            else:
                rows.append({c: parse_value(x) for c, x in zip(columns, cells)})
    return header, rows
