"""Backend selection for the numeric kernels.

Kernels come in two flavours: explicit loops compiled with numba, and
vectorised numpy code. Set ``PASSIVE_CAUSAL_BACKEND=numpy`` to force the
numpy path (numba is also skipped automatically when it cannot be imported).
"""

from __future__ import annotations

import os

_REQUESTED = os.environ.get("PASSIVE_CAUSAL_BACKEND", "numba").strip().lower()

try:  # pragma: no cover - exercised implicitly by whichever backend is active
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

if _REQUESTED not in ("numba", "numpy"):
    raise ValueError(
        f"PASSIVE_CAUSAL_BACKEND must be 'numba' or 'numpy', got {_REQUESTED!r}"
    )

USE_NUMBA = HAVE_NUMBA and _REQUESTED == "numba"
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when numba is usable, otherwise an identity decorator."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(fn):
        return fn

    return wrap
