"""CSV read/write with exact float round-tripping.

Floats are written with ``repr`` so ``read_csv(write_csv(rows))`` returns the
same values; cells parse back as int, float or str in that order.
"""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):
        return _fmt(v.item())
    return str(v)


def _parse(s: str):
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def write_csv(path, columns, rows) -> str:
    """Write ``rows`` (dicts) with a header; returns the file's sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return file_hash(path)


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: _parse(v) for k, v in row.items()} for row in reader]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
