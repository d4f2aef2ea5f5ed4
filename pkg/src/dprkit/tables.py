"""Delimited-text helpers used by every file the toolkit writes.

All numeric output goes through :func:`fmt` so files round-trip bit-exactly:
17 significant digits are enough to reconstruct any IEEE double.  Missing or
undefined values are written as the literal ``NA``.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import IO, Iterable, Sequence

from .errors import ValidationError

NA = "NA"


def fmt(value) -> str:
    """Render one cell: floats at 17 significant digits, None/NaN as NA."""
    if value is None:
        return NA
    if isinstance(value, float):
        if math.isnan(value):
            return NA
        return format(value, ".17g")
    return str(value)


def parse_float(cell: str) -> float:
    if cell == NA or cell == "":
        return math.nan
    return float(cell)


def write_table(dest, header: Sequence[str], rows: Iterable[Sequence], delimiter: str = ",") -> None:
    """Write rows of cells through :func:`fmt` with a fixed newline convention."""

    def _write(fh: IO[str]) -> None:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([fmt(c) for c in row])

    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            _write(fh)
    else:
        _write(dest)


def read_table(source, delimiter: str = ",") -> tuple[list[str], list[list[str]]]:
    """Read a delimited file written by :func:`write_table`; returns (header, rows)."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            return read_table(fh, delimiter)
    reader = csv.reader(source, delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError("empty table: header row is required") from None
    return header, [row for row in reader]


def table_string(header: Sequence[str], rows: Iterable[Sequence], delimiter: str = ",") -> str:
    buf = io.StringIO()
    write_table(buf, header, rows, delimiter)
    return buf.getvalue()
