"""Global numeric precision switch.

Gradient checks need float64 headroom; training and benchmarking run in
float32. The dtype is process-global rather than per-tensor: every tensor
picks it up at creation time, so a whole computation runs in one precision.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}

_dtype = np.float32


def dtype():
    """Return the active floating-point dtype (numpy scalar type)."""
    return _dtype


def set_dtype(name):
    """Set the active dtype; accepts 'float32'/'float64' or the numpy types."""
    global _dtype
    if name in (np.float32, np.float64):
        _dtype = name
        return
    try:
        _dtype = _DTYPES[str(name)]
    except KeyError:
        raise ValueError(f"unsupported dtype {name!r}; use float32 or float64") from None


@contextmanager
def precision(name):
    """Temporarily switch the global dtype (e.g. to float64 for FD checks)."""
    global _dtype
    previous = _dtype
    set_dtype(name)
    try:
        yield
    finally:
        _dtype = previous
