"""Backend selection for the hot numeric kernels.

Set ``GCGKIT_NUMBA=0`` in the environment to force the pure-numpy path.
The flag is read once at import time.
"""
import os

_flag = os.environ.get("GCGKIT_NUMBA", "1").strip().lower()
_wanted = _flag not in ("0", "false", "no", "off")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a hard dependency but stay importable
    _numba = None

USE_NUMBA = bool(_wanted and _numba is not None)


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if _numba is None:
        return fn
    return _numba.njit(cache=True, nogil=True)(fn)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
