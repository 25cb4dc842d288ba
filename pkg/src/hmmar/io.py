"""CSV and JSON file formats used by the command line."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from hmmar.errors import InvalidInputError
from hmmar.model import HmMarParams, TimeSeries


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def parse_series_csv(text: str) -> TimeSeries:
    """Parse a one-column CSV of observations.

    A first row whose first cell is not numeric is a header; if the header
    has a ``y`` column that column is read, otherwise the first one.
    """
    rows = [row for row in csv.reader(io.StringIO(text))]
    col = 0
    start = 0
    if rows and rows[0] and not _is_number(rows[0][0].strip()):
        header = [h.strip() for h in rows[0]]
        col = header.index("y") if "y" in header else 0
        start = 1
    values = []
    for lineno, row in enumerate(rows[start:], start=start + 1):
        if not row or all(not c.strip() for c in row):
            continue
        if col >= len(row):
            raise InvalidInputError(f"line {lineno}: missing column {col + 1}")
        cell = row[col].strip()
        try:
            v = float(cell)
        except ValueError:
            raise InvalidInputError(f"line {lineno}: non-numeric value {cell!r}") from None
        if not math.isfinite(v):
            raise InvalidInputError(f"line {lineno}: non-finite value {cell!r}")
        values.append(v)
    if not values:
        raise InvalidInputError("no observations in input")
    return TimeSeries(values)


def read_series_csv(path: str | Path) -> TimeSeries:
    return parse_series_csv(Path(path).read_text())


def read_model(path: str | Path) -> HmMarParams:
    return HmMarParams.from_json(Path(path).read_text())


def series_to_csv(series: TimeSeries, states: Sequence[int] | None = None, p: int = 0) -> str:
    """``y`` column, plus a ``z`` column when ``states`` (for ``t = p+1..T``) are given.

    The first ``p`` rows have an empty ``z`` cell.
    """
    out = io.StringIO()
    if states is None:
        out.write("y\n")
        for v in series.values:
            out.write(f"{float(v)!r}\n")
        return out.getvalue()
    out.write("y,z\n")
    for i, v in enumerate(series.values):
        z = "" if i < p else str(int(states[i - p]))
        out.write(f"{float(v)!r},{z}\n")
    return out.getvalue()


def path_to_csv(path: Sequence[int], p: int) -> str:
    out = io.StringIO()
    out.write("t,z\n")
    for s, z in enumerate(np.asarray(path)):
        out.write(f"{p + 1 + s},{int(z)}\n")
    return out.getvalue()
