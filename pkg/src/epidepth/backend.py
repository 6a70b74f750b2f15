"""Kernel backend availability: numba-jitted loops vs pure-numpy variants.

Numba is treated as unavailable when it is not importable or when the
environment variable ``EPIDEPTH_NO_NUMBA`` is set to 1/true/yes.  Which
variant each kernel actually binds to is decided per kernel in
:mod:`epidepth.kernels`; both implementations of every kernel stay importable
so tests and the benchmark can compare them directly.
"""

import os

_flag = os.environ.get("EPIDEPTH_NO_NUMBA", "").strip().lower()
NUMBA_DISABLED = _flag in {"1", "true", "yes"}

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled via EPIDEPTH_NO_NUMBA")
    import numba  # noqa: F401
    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

BACKEND = "numba" if NUMBA_AVAILABLE else "numpy"


def jit_if_available(func):
    """Conditional decorator: numba.njit(cache=True) when active, else identity."""
    if NUMBA_AVAILABLE:
        import numba
        return numba.njit(cache=True)(func)
    return func
