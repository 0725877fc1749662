"""Numba switch for the hot kernels.

Set ``ORLICZ_OT_NO_NUMBA=1`` to force the pure-numpy fallback path (also used
automatically when numba is not importable).
"""
import os

_disabled = os.environ.get("ORLICZ_OT_NO_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _disabled:
        raise ImportError("numba disabled by ORLICZ_OT_NO_NUMBA")
    from numba import njit as _njit

    NUMBA_ENABLED = True
except ImportError:
    _njit = None
    NUMBA_ENABLED = False


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity decorator otherwise."""
    if NUMBA_ENABLED:
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrapper(f):
        return f

    return wrapper
