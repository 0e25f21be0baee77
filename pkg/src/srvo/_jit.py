"""Numba switch.

Set ``SRVO_NUMBA=0`` to force the pure-numpy kernels (also used automatically
when numba is not importable).
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def numba_enabled():
    return HAVE_NUMBA and os.environ.get("SRVO_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = numba_enabled()


def njit(fn):
    """Compile ``fn`` with numba when available, else return it untouched."""
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn
