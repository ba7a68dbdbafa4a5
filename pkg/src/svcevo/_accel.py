"""Numba switch.

Set ``SVCEVO_DISABLE_NUMBA=1`` to run every kernel through its pure numpy /
Python path. The flag is read once, at import time.
"""
import os

_FLAG = os.environ.get("SVCEVO_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

NUMBA_ENABLED = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def jit(fn=None, *, cache=True):
    """Compile ``fn`` with ``numba.njit`` when enabled, else return it untouched.

    Pass ``cache=False`` for self-recursive kernels and their callers: numba's
    on-disk cache can hand back stale machine code for those.
    """
    if fn is None:
        return lambda f: jit(f, cache=cache)
    if NUMBA_ENABLED:
        return numba.njit(cache=cache)(fn)
    return fn
