"""JIT switch for the hot kernels.

Set ``DISDCA_DISABLE_JIT=1`` to run every kernel as plain Python/numpy.
Compiled dispatchers keep the undecorated function on ``.py_func``.
"""
import os

JIT_ENABLED = os.environ.get("DISDCA_DISABLE_JIT", "").lower() not in ("1", "true", "yes")

if JIT_ENABLED:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        JIT_ENABLED = False

if not JIT_ENABLED:

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def python_impl(func):
    """Return the uncompiled version of a kernel."""
    return getattr(func, "py_func", func)
