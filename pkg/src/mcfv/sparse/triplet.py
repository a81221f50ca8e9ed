"""Binary triplet dump of a sparse matrix, for cross-checking against external tools.

Layout (little-endian): magic ``MCTRIP01``, n_rows u64, n_cols u64, nnz u64,
rows u64[nnz], cols u64[nnz], values f64[nnz].
"""
from __future__ import annotations

import os

import numpy as np

from .ldu import SparseError

MAGIC = b"MCTRIP01"
_HEADER = np.dtype([("magic", "S8"), ("n_rows", "<u8"), ("n_cols", "<u8"), ("nnz", "<u8")])


def dump_triplets(path: str | os.PathLike, rows, cols, values, shape: tuple[int, int]) -> None:
    rows = np.asarray(rows, dtype="<u8")
    cols = np.asarray(cols, dtype="<u8")
    values = np.asarray(values, dtype="<f8")
    if not (len(rows) == len(cols) == len(values)):
        raise SparseError("rows, cols and values must have equal length")
    head = np.array([(MAGIC, shape[0], shape[1], len(values))], dtype=_HEADER)
    with open(path, "wb") as fh:
        fh.write(head.tobytes())
        fh.write(rows.tobytes())
        fh.write(cols.tobytes())
        fh.write(values.tobytes())


def load_triplets(path: str | os.PathLike):
    """Return (rows, cols, values, shape)."""
    data = open(path, "rb").read()
    if len(data) < _HEADER.itemsize:
        raise SparseError(f"{path}: truncated header")
    head = np.frombuffer(data[:_HEADER.itemsize], dtype=_HEADER)[0]
    if head["magic"] != MAGIC:
        raise SparseError(f"{path}: bad magic {head['magic']!r}")
    nnz = int(head["nnz"])
    expected = _HEADER.itemsize + nnz * 24
    if len(data) != expected:
        raise SparseError(f"{path}: expected {expected} bytes, found {len(data)}")
    off = _HEADER.itemsize
    rows = np.frombuffer(data, "<u8", nnz, off).astype(np.int64)
    cols = np.frombuffer(data, "<u8", nnz, off + 8 * nnz).astype(np.int64)
    vals = np.frombuffer(data, "<f8", nnz, off + 16 * nnz).copy()
    return rows, cols, vals, (int(head["n_rows"]), int(head["n_cols"]))
