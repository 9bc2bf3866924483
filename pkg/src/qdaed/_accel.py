"""Backend selection for the hot kernels.

Numba is used when it imports cleanly and ``QDAED_DISABLE_NUMBA`` is unset.
Setting ``QDAED_DISABLE_NUMBA=1`` forces the pure-numpy implementations,
which produce bit-identical results.
"""

import os

_FALSEY = {"", "0", "false", "no", "off"}

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

DISABLED_BY_ENV = os.environ.get("QDAED_DISABLE_NUMBA", "").strip().lower() not in _FALSEY
USE_NUMBA = HAVE_NUMBA and not DISABLED_BY_ENV


def njit(*args, **kwargs):
    """``numba.njit`` with on-disk caching, or a no-op decorator without numba."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return numba.njit(*args, **kwargs)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


def set_threads(n):
    """Bound BLAS and numba worker threads; results do not depend on ``n``."""
    if n is None or n <= 0:
        return
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=n)
    if HAVE_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
