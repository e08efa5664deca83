"""Backend selection for the compiled kernels.

Set ``HETPLAN_DISABLE_NUMBA=1`` to force the pure numpy/Python path. The flag
is read once at import time; tests that compare both paths call the
``*_numpy`` / ``*_numba`` variants in :mod:`hetplan._kernels` directly.
"""
import os

_DISABLED = os.environ.get("HETPLAN_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by HETPLAN_DISABLE_NUMBA")
    import numba

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise the identity decorator."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda func: func
    return numba.njit(*args, **kwargs)


def backend_name():
    return "numba" if HAVE_NUMBA else "numpy"
