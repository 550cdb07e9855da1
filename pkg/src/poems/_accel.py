"""Backend switch for the hot kernels.

Kernels in :mod:`poems.kernels` come in two flavours: a numba ``@njit`` loop
version and a pure-numpy version. ``POEMS_DISABLE_NUMBA=1`` (or numba being
absent) selects the numpy path. The flag is read once at import time.
"""
import os

_FLAG = os.environ.get("POEMS_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise.

    Compilation is lazy either way, so importing a module that defines
    jitted kernels never pays compile cost when the numpy path is active.
    """
    kwargs.setdefault("cache", True)
    if NUMBA_AVAILABLE:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]):
        return args[0]
    return lambda fn: fn


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
