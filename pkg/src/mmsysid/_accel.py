"""Backend selection for the hot kernels.

Kernels come in two flavours: loop code compiled with numba, and a
vectorised numpy path. Set ``MMSYSID_DISABLE_NUMBA=1`` to force the numpy
path (also used automatically when numba cannot be imported).
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("MMSYSID_DISABLE_NUMBA", "0").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = _numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` when the numba backend is active, identity otherwise.

    Functions decorated this way must also be valid plain Python, so the
    fallback path can run them unchanged (slowly).
    """
    if USE_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("error_model", "numpy")
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
