"""Numba / numpy backend switch.

Every hot kernel in the package exists twice: a numba ``@njit`` loop and a
vectorised numpy version.  Which one the public functions dispatch to is fixed
at import time by the ``TOPOFUSION_NUMBA`` environment variable (``0`` selects
the numpy path).  Both versions are always importable so they can be tested
against each other.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    HAVE_NUMBA = False

_flag = os.environ.get("TOPOFUSION_NUMBA", "1").strip().lower()
USE_NUMBA = HAVE_NUMBA and _flag not in ("0", "false", "off", "no")


def njit(*args, **kwargs):
    """``numba.njit`` with on-disk caching; identity decorator without numba."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


if HAVE_NUMBA:
    prange = numba.prange
else:  # pragma: no cover
    prange = range


def select(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
