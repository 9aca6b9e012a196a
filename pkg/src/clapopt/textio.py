"""Text serialization helpers shared by every on-disk format.

All numeric files in this package are plain text with floats printed at 17
significant digits, which round-trips IEEE-754 doubles exactly. Writers go
through :func:`atomic_write_text` so a reader never observes a torn file.
"""

from __future__ import annotations

import hashlib
import os
import tempfile

import numpy as np


def fmt_float(x: float) -> str:
    """17 significant digits: enough to reproduce the exact double."""
    return "%.17g" % float(x)


def fmt_array(arr: np.ndarray) -> list[str]:
    """Row-major flattening, one value per line."""
    return [fmt_float(v) for v in np.asarray(arr, dtype=np.float64).ravel()]


def parse_floats(lines, count: int, shape: tuple) -> np.ndarray:
    vals = np.array([float(s) for s in lines[:count]], dtype=np.float64)
    if vals.size != count:
        raise ValueError(f"expected {count} values, got {vals.size}")
    return vals.reshape(shape)


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def atomic_write_text(path: str, text: str) -> None:
    """Write to a temp file in the same directory, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".partial")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_text(path: str) -> str:
    with open(path, "r") as f:
        return f.read()
