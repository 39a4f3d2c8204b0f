"""Selects numba-compiled kernels or their pure-numpy twins.

Set ``DEBATE_EVOLVE_DISABLE_NUMBA=1`` to force the numpy path (also used
automatically when numba is not importable).
"""

import os

_DISABLED = os.environ.get("DEBATE_EVOLVE_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    import numba

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA


def njit(fn):
    """numba.njit when available, else the function itself (never called on the hot path)."""
    if HAS_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn
