"""Optional numba acceleration.

Hot loops (sprite rasterization, scale-space extremum scan) ship in two
flavours: an ``@njit`` kernel and a vectorized numpy path.  Set
``POINTTRACK_NUMBA=0`` to force the numpy path, e.g. on platforms without
numba or to cross-check the kernels.
"""

import os
import warnings

_flag = os.environ.get("POINTTRACK_NUMBA", "1").strip().lower()
_requested = _flag not in ("0", "false", "no", "off")

try:
    import numba as _nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    _nb = None
    if _requested:
        warnings.warn("numba not found; falling back to numpy kernels")

USE_NUMBA = _requested and _nb is not None


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if _nb is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return _nb.njit(*args, **kwargs)


def pick(numba_impl, numpy_impl, use_numba=None):
    """Return the kernel selected by ``use_numba`` (default: env flag)."""
    if use_numba is None:
        use_numba = USE_NUMBA
    return numba_impl if (use_numba and _nb is not None) else numpy_impl
