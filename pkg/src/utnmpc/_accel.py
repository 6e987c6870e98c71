"""Numba switch.

Hot kernels are decorated with :func:`jit`.  Setting ``UTNMPC_NUMBA=0`` in the
environment before import runs the very same functions as plain Python over
numpy arrays, which is slow but handy for debugging and for cross-checking the
compiled path.  The uncompiled function is always reachable as ``.py_func``.
"""

import os

_FALSE = {"0", "false", "no", "off"}

USE_NUMBA = os.environ.get("UTNMPC_NUMBA", "1").strip().lower() not in _FALSE

if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False


def jit(fn):
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    fn.py_func = fn
    return fn


def backend():
    return "numba" if USE_NUMBA else "python"
