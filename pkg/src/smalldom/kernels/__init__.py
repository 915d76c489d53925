"""IRLS kernel backend selection.

The compiled kernel is preferred when the extension built; the pure-numpy
twin is the fallback.  ``SMALLDOM_PURE_PYTHON=1`` forces the fallback,
which the benchmark and the backend-equivalence tests rely on.
"""

import os

from .pykernels import CONVERGED, DEGENERATE_SCALE, MAD_NORMAL, MAX_ITER, PERFECT_FIT

if os.environ.get("SMALLDOM_PURE_PYTHON"):
    from . import pykernels as _impl

    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "c"
    except ImportError:
        from . import pykernels as _impl

        BACKEND = "python"

irls_huber = _impl.irls_huber


def backend() -> str:
    """Name of the active kernel backend ('c' or 'python')."""
    return BACKEND
