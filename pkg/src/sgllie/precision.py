"""Global floating-point precision switch.

Production code runs in 32-bit; verification (finite-difference gradient
checks, invariance tests) runs in 64-bit. The active dtype is consulted
when tensors are created, so switching only affects tensors built after
the switch. ``SGLLIE_PRECISION=f32|f64`` sets the process default.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}

_active = os.environ.get("SGLLIE_PRECISION", "f32")
if _active not in _DTYPES:
    raise ValueError(f"SGLLIE_PRECISION must be f32 or f64, got {_active!r}")


def get_precision() -> str:
    return _active


def set_precision(name: str) -> None:
    global _active
    if name not in _DTYPES:
        raise ValueError(f"precision must be f32 or f64, got {name!r}")
    _active = name


def active_dtype() -> np.dtype:
    return np.dtype(_DTYPES[_active])


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch precision; restores the previous mode on exit."""
    prev = _active
    set_precision(name)
    try:
        yield
    finally:
        set_precision(prev)
