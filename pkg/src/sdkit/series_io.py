"""Two-column ``t,value`` CSV files used for lookups and observations.

Lines starting with ``#`` are comments (the synthetic datasets carry a
provenance banner). Values are written with ``repr`` so they read back to
the identical float.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable


class SeriesFormatError(ValueError):
    pass


def parse_series_csv(text: str, name: str = "<csv>") -> list[tuple[float, float]]:
    rows = [
        (i, row) for i, row in enumerate(csv.reader(io.StringIO(text)), start=1)
        if row and not row[0].lstrip().startswith("#") and any(c.strip() for c in row)
    ]
    if not rows:
        raise SeriesFormatError(f"{name}: empty file")
    lineno, header = rows[0]
    if [c.strip() for c in header] != ["t", "value"]:
        raise SeriesFormatError(f"{name}:{lineno}: expected header 't,value', got {','.join(header)!r}")
    points: list[tuple[float, float]] = []
    for lineno, row in rows[1:]:
        if len(row) != 2:
            raise SeriesFormatError(f"{name}:{lineno}: expected 2 columns, got {len(row)}")
        try:
            t, v = float(row[0]), float(row[1])
        except ValueError:
            raise SeriesFormatError(f"{name}:{lineno}: not a number in {','.join(row)!r}") from None
        if not (math.isfinite(t) and math.isfinite(v)):
            raise SeriesFormatError(f"{name}:{lineno}: values must be finite")
        if points and t <= points[-1][0]:
            raise SeriesFormatError(f"{name}:{lineno}: times must be strictly increasing")
        points.append((t, v))
    if not points:
        raise SeriesFormatError(f"{name}: no data rows")
    return points


def read_series_csv(path: str | Path) -> list[tuple[float, float]]:
    path = Path(path)
    return parse_series_csv(path.read_text(encoding="utf-8"), str(path))


def write_series_csv(path: str | Path, rows: Iterable[tuple[float, float]], header_comment: str | None = None) -> None:
    lines = []
    if header_comment:
        lines += [c if c.startswith("#") else f"# {c}" for c in header_comment.splitlines()]
    lines.append("t,value")
    lines += [f"{float(t)!r},{float(v)!r}" for t, v in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
