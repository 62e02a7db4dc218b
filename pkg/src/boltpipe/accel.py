"""Numba acceleration switch.

Hot kernels ship in two variants: a numba @njit version and a pure-numpy
fallback. Set the environment variable BOLTPIPE_NO_NUMBA=1 (or install
without numba) to force the fallback path. Both paths are exact and
produce identical results.
"""

import os

NUMBA_DISABLED = os.environ.get("BOLTPIPE_NO_NUMBA", "").strip() not in ("", "0")

if not NUMBA_DISABLED:
    # workqueue avoids noisy TBB/OpenMP probing on constrained hosts
    os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
    try:
        from numba import njit, prange

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a soft dependency
        HAVE_NUMBA = False
else:
    HAVE_NUMBA = False

if not HAVE_NUMBA:
    def njit(*args, **kwargs):  # noqa: D103 - decorator stub
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap

    prange = range
