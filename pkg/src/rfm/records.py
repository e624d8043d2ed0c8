"""CSV helpers shared by the trace exporters."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence


def write_rows(path: str | Path, rows: Iterable[dict], columns: Sequence[str]) -> None:
    """Write ``rows`` with ``columns`` first; extra keys are appended in first-seen order."""
    rows = list(rows)
    cols = list(columns)
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, restval="", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def append_row(path: str | Path, row: dict, columns: Sequence[str]) -> None:
    """Append one row, writing the header when the file is new (incremental flush)."""
    path = Path(path)
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), restval="", extrasaction="ignore",
                           lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow({k: _fmt(v) for k, v in row.items()})


def read_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    return repr(v) if isinstance(v, float) else v
