"""Byte-stable CSV/JSON writers and the Table-1 / Table-2 report layouts."""

from __future__ import annotations

import csv
import io
import json
import math

from .data_model import atomic_write_text

SIG_DIGITS = 6

# Published reference values, kept for side-by-side report columns.
PUBLISHED_TABLE1 = {
    "meanIoU": {
        "l1": (66.92, 77.31, 82.47, 83.70),
        "l2": (66.23, 81.08, 83.30, 83.96),
        "l3": (73.38, 81.19, 83.53, 83.89),
        "l4": (74.47, 81.59, 83.62, 83.72),
    },
    "Dice": {
        "l1": (78.92, 86.50, 90.13, 90.93),
        "l2": (78.21, 89.17, 90.68, 91.11),
        "l3": (83.68, 89.23, 90.83, 91.07),
        "l4": (84.48, 89.58, 90.89, 90.96),
    },
}

PUBLISHED_TABLE2 = (
    # method, params, aFD_ED, aFD_ES
    ("DeepLabv3*", "40M", 8.63, 3.66),
    ("UVT_R", "347M", 7.88, 2.86),
    ("UVT_M", "347M", 7.17, 3.35),
    ("EchoGNN", "1.7M", 3.68, 4.15),
    ("DRNNEcho", ">10M", 3.7, 4.1),
    ("EchoDFKD (subset)", "0.72M", 2.72, 2.83),
    ("EchoDFKD* (full test)", "0.72M", 2.77, 2.83),
)


def fmt(value):
    """Render a cell with fixed 6-significant-digit floats."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return f"{value:.{SIG_DIGITS}g}"
    return str(value)


def csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    atomic_write_text(path, csv_text(header, rows))


def _round_floats(obj):
    if isinstance(obj, float):
        return float(fmt(obj)) if math.isfinite(obj) else fmt(obj)
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def write_json(path, obj):
    atomic_write_text(path, json.dumps(_round_floats(obj), indent=2, sort_keys=True) + "\n")


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def table1_grid(values):
    """4x4 grid rows ``l1..l4`` x columns ``B1..B4``; ``values`` maps "B2_l1" -> number."""
    header = ["layers", "B1", "B2", "B3", "B4"]
    rows = []
    for l in range(1, 5):
        rows.append([f"l{l}"] + [values.get(f"B{b}_l{l}") for b in range(1, 5)])
    return header, rows
