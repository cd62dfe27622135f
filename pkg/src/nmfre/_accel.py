"""Numba switch for the hot kernels.

Kernels are written once in the numpy subset numba understands. When numba is
importable and ``NMFRE_DISABLE_NUMBA`` is unset (or "0"), they are compiled with
``@njit``; otherwise the same functions run as plain numpy.
"""

import os
import warnings

_flag = os.environ.get("NMFRE_DISABLE_NUMBA", "0").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError
    import numba
    from numba.core.errors import NumbaPerformanceWarning

    warnings.simplefilter("ignore", NumbaPerformanceWarning)
    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False


def jit(func):
    """Compile ``func`` in nopython mode when numba is active."""
    if HAS_NUMBA:
        return numba.njit(cache=True)(func)
    return func


def backend():
    return "numba" if HAS_NUMBA else "numpy"
