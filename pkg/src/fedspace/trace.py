"""Per-round diagnostics and their CSV serialisation."""

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

TRUNCATION_MARKER = "TRUNCATED"


@dataclass
class RoundTrace:
    """One row of diagnostics.

    ``norm_h_sq`` and ``objective`` are evaluated at the statistic held
    *before* the update of this row; ``norm_H_sq`` is the squared norm of
    the field used by the update. Thinned diagnostics are NaN.
    """

    algo: str
    epoch: float
    t: int
    k: int
    norm_H_sq: float
    norm_h_sq: float
    objective: float
    bits: int
    ce_count: int
    participants: int
    G_memory_gap: float = math.nan


COLUMNS = tuple(f.name for f in fields(RoundTrace))


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_trace(path_or_file, rows, truncated=False):
    """Write rows as RFC-4180 CSV with a header; optionally append the
    truncation marker row."""
    close = False
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        fh = open(path_or_file, "w", newline="", encoding="utf-8")
        close = True
    else:
        fh = path_or_file
    try:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(COLUMNS)
        for row in rows:
            d = asdict(row)
            writer.writerow([_fmt(d[c]) for c in COLUMNS])
        if truncated:
            writer.writerow([TRUNCATION_MARKER] + [""] * (len(COLUMNS) - 1))
    finally:
        if close:
            fh.close()


def read_trace(path):
    """Read a trace CSV back; returns ``(rows, truncated)``."""
    rows = []
    truncated = False
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"unexpected trace header {reader.fieldnames}")
        for rec in reader:
            if rec["algo"] == TRUNCATION_MARKER:
                truncated = True
                continue
            rows.append(
                RoundTrace(
                    algo=rec["algo"],
                    epoch=float(rec["epoch"]),
                    t=int(rec["t"]),
                    k=int(rec["k"]),
                    norm_H_sq=float(rec["norm_H_sq"]),
                    norm_h_sq=float(rec["norm_h_sq"]),
                    objective=float(rec["objective"]),
                    bits=int(rec["bits"]),
                    ce_count=int(rec["ce_count"]),
                    participants=int(rec["participants"]),
                    G_memory_gap=float(rec["G_memory_gap"]),
                )
            )
    return rows, truncated


def column(rows, name):
    return np.array([getattr(r, name) for r in rows], dtype=float)
