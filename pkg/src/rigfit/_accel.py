"""Optional numba acceleration.

Set ``RIGFIT_DISABLE_NUMBA=1`` to force the pure-numpy code paths. The flag
is read once at import time; kernels consult :data:`USE_NUMBA`.
"""
import os

USE_NUMBA = os.environ.get("RIGFIT_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    USE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when acceleration is enabled, identity otherwise."""
    kwargs.setdefault("cache", True)

    def wrap(fn):
        if not USE_NUMBA:
            return fn
        return numba.njit(**kwargs)(fn)

    if len(args) == 1 and callable(args[0]):
        return wrap(args[0])
    return wrap


def num_threads():
    value = os.environ.get("RIGFIT_THREADS")
    if value is None:
        return os.cpu_count() or 1
    return max(1, int(value))
