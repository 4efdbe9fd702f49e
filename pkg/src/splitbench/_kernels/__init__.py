"""Hot-loop kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time from ``SPLITBENCH_NUMBA``:
``"0"`` forces numpy, anything else uses numba when it imports cleanly.
Results agree between backends to rounding; within one backend every
kernel is deterministic.
"""

import os

from . import _numpy

BACKEND = "numpy"

if os.environ.get("SPLITBENCH_NUMBA", "1") != "0":
    try:
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is optional
        _impl = _numpy
else:
    _impl = _numpy

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
pairwise_distances = _impl.pairwise_distances
pairwise_distances_backward = _impl.pairwise_distances_backward

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "maxpool_forward",
    "maxpool_backward",
    "pairwise_distances",
    "pairwise_distances_backward",
]
