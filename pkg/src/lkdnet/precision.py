"""Global numeric precision switch.

The whole stack runs in a single working dtype: float32 by default, float64
for gradient checking (central differences at step 1e-4 drown in float32
rounding noise). The dtype is a process-wide run mode, not a per-tensor
property; everything created after a switch uses the new dtype.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DTYPES = {
    "f32": np.float32,
    "f64": np.float64,
    "float32": np.float32,
    "float64": np.float64,
}

_current = np.float32


def dtype() -> type:
    """Working scalar dtype for newly created tensors."""
    return _current


def set_dtype(d) -> None:
    """Switch the working dtype ("f32"/"f64" or a numpy float type)."""
    global _current
    if isinstance(d, str):
        try:
            _current = _DTYPES[d]
        except KeyError:
            raise ValueError(f"unknown dtype {d!r}, expected one of {sorted(_DTYPES)}")
    elif d in (np.float32, np.float64):
        _current = d
    else:
        raise ValueError(f"unsupported dtype {d!r}")


@contextlib.contextmanager
def use_dtype(d):
    """Temporarily switch the working dtype (used by the gradient checker)."""
    global _current
    prev = _current
    set_dtype(d)
    try:
        yield
    finally:
        _current = prev
