"""Switch between numba-compiled kernels and their pure-numpy twins.

Set ``POINTBERT_NUMBA=0`` in the environment to force the numpy path. Both
paths produce bit-identical results; the flag only changes speed.
"""

import os

_FLAG = os.environ.get("POINTBERT_NUMBA", "1").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = _numba is not None and _FLAG not in ("0", "false", "off", "no")


def njit(func=None, **kwargs):
    """``numba.njit(cache=True)`` when available, otherwise a no-op decorator."""
    kwargs.setdefault("cache", True)

    def wrap(f):
        if _numba is None:
            return f
        return _numba.njit(**kwargs)(f)

    if func is not None:
        return wrap(func)
    return wrap


def backend():
    return "numba" if USE_NUMBA else "numpy"
