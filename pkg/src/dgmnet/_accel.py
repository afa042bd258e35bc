"""Numba availability and kernel-path selection.

Set ``DGM_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when numba
is installed. ``DGM_THREADS`` caps the numba thread pool.
"""

import logging
import os
import warnings

logger = logging.getLogger(__name__)


def _flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


try:
    import numba

    HAVE_NUMBA = True
    # an old system TBB only means numba falls back to another threading layer
    warnings.filterwarnings("ignore", message="The TBB threading layer",
                            category=numba.NumbaWarning)
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _flag("DGM_DISABLE_NUMBA")


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)

    def wrap(func):
        return func

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return wrap


if HAVE_NUMBA:
    prange = numba.prange
else:  # pragma: no cover
    prange = range


def thread_cap():
    raw = os.environ.get("DGM_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DGM_THREADS must be an integer >= 1, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"DGM_THREADS must be an integer >= 1, got {raw!r}")
    return n


def apply_thread_cap():
    n = thread_cap()
    if n is not None and HAVE_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


def backend():
    return "numba" if USE_NUMBA else "numpy"
