"""Numba availability and the env switch that selects the kernel backend.

Set ``DACT_DISABLE_NUMBA=1`` to force the pure-numpy path.
"""
import os
import warnings

DISABLE_ENV = "DACT_DISABLE_NUMBA"

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep but stay importable without it
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func

        return decorator

    warnings.warn("numba not importable; using numpy kernels only")


def numba_enabled() -> bool:
    flag = os.environ.get(DISABLE_ENV, "").strip().lower()
    return HAVE_NUMBA and flag not in ("1", "true", "yes", "on")


__all__ = ["njit", "HAVE_NUMBA", "numba_enabled", "DISABLE_ENV"]
