"""CSV contract: explicit header, 0-based indices, '.' decimals, UTF-8, LF endings."""

from __future__ import annotations

import csv
import hashlib
import io
from pathlib import Path

import numpy as np

__all__ = ["CsvFormatError", "read_table", "write_table", "fmt", "sha256_file"]


class CsvFormatError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


def fmt(x) -> str:
    """Shortest round-trip representation of a float (ints and strings pass through)."""
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def read_table(path, header: tuple[str, ...], int_cols: int = 2) -> dict[str, np.ndarray]:
    """Read a CSV whose header must start with ``header``.

    The first ``int_cols`` columns are parsed as nonnegative integers, the
    rest as finite floats. Extra columns are ignored.
    """
    path = Path(path)
    cols: list[list] = [[] for _ in header]
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise CsvFormatError(path, 1, "empty file") from None
        got = tuple(c.strip() for c in first[: len(header)])
        if got != header:
            raise CsvFormatError(path, 1, f"expected header {','.join(header)!r}, got {','.join(first)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise CsvFormatError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            for k, name in enumerate(header):
                cell = row[k].strip()
                try:
                    if k < int_cols:
                        val = int(cell)
                        if val < 0:
                            raise ValueError
                    else:
                        val = float(cell)
                        if not np.isfinite(val):
                            raise ValueError
                except ValueError:
                    raise CsvFormatError(path, lineno, f"bad value {cell!r} in column {name!r}") from None
                cols[k].append(val)
    out = {}
    for k, name in enumerate(header):
        out[name] = np.asarray(cols[k], dtype=np.int64 if k < int_cols else np.float64)
    return out


def write_table(path, header, columns) -> None:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in zip(*columns):
        buf.write(",".join(fmt(v) for v in row) + "\n")
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
