"""Numba switch.

Kernels are written in the numba-compatible subset of Python and decorated
with :func:`kernel`.  Setting ``IPSHARP_DISABLE_NUMBA=1`` in the environment
before import (or running without numba installed) leaves them as plain
Python functions operating on numpy arrays.
"""
from __future__ import annotations

import os

_DISABLED = os.environ.get("IPSHARP_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError
    import numba as _numba

    NUMBA_ENABLED = True
except ImportError:
    _numba = None
    NUMBA_ENABLED = False


def kernel(func):
    """Compile ``func`` in nopython mode (GIL released) when numba is enabled."""
    if NUMBA_ENABLED:
        return _numba.njit(cache=True, nogil=True)(func)
    return func


def backend() -> str:
    return "numba" if NUMBA_ENABLED else "python"
