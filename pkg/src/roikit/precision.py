"""Run-wide element type switch.

Training and benchmarking run in float32; verification (finite differences,
dense-matrix oracles) needs float64 headroom. The switch is global so every
module allocates consistently.
"""
from __future__ import annotations

import contextlib

import numpy as np

_DTYPE = np.float32

_NAMES = {"f32": np.float32, "f64": np.float64}


def set_precision(name: str) -> None:
    global _DTYPE
    if name not in _NAMES:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_NAMES)}")
    _DTYPE = _NAMES[name]


def dtype() -> np.dtype:
    return np.dtype(_DTYPE)


def precision_name() -> str:
    return "f64" if _DTYPE is np.float64 else "f32"


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch element type (used by tests and the verify suite)."""
    old = precision_name()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)
