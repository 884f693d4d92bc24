"""On-disk formats: ULZ1 arrays, problem bundles and CSV tables.

ULZ1 layout: 16-byte header (``b"ULZ1"``, rows u32, cols u32, reserved u32,
all little-endian) followed by ``rows * cols`` little-endian float64 values
in row-major order. Vectors are stored as ``n x 1``.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from pathlib import Path

import numpy as np

from .core import ProblemInstance
from .errors import FormatError

MAGIC = b"ULZ1"
_HEADER = struct.Struct("<4sIII")


def write_ulz(path, array):
    arr = np.asarray(array, dtype="<f8")
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise FormatError(f"ULZ1 stores 1-D or 2-D arrays, got {arr.ndim}-D")
    rows, cols = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols, 0))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_ulz(path, vector=False):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, rows, cols, _ = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(rows, cols).astype(np.float64)
    if vector:
        if cols != 1:
            raise FormatError(f"{path}: expected a column vector, got {rows}x{cols}")
        return arr[:, 0]
    return arr


def _fmt(value):
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def write_meta(path, meta):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "value"])
        for k, v in meta.items():
            w.writerow([k, _fmt(v)])


def read_meta(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["key", "value"]:
        raise FormatError(f"{path}: missing key,value header")
    return {r[0]: r[1] for r in rows[1:] if r}


def save_bundle(directory, problem: ProblemInstance, meta):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ulz(d / "A.f64", problem.A)
    write_ulz(d / "b.f64", problem.b)
    write_ulz(d / "xstar.f64", problem.x_star)
    write_meta(d / "meta.csv", meta)


def load_bundle(directory):
    d = Path(directory)
    A = read_ulz(d / "A.f64")
    b = read_ulz(d / "b.f64", vector=True)
    x = read_ulz(d / "xstar.f64", vector=True)
    meta = read_meta(d / "meta.csv")
    snr = meta.get("snr_db", "")
    seed = int(meta.get("seed", "0") or 0)
    return ProblemInstance.from_signal(A, x, b, float(snr) if snr else None, seed), meta


def write_table(path, header, rows):
    """CSV with ``header``; ``None`` cells are blank, infinities spelled out."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else _fmt(v) for v in row])
    os.replace(tmp, path)


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    return rows[0], rows[1:]
