"""Geometry hot kernels with backend selection at import time.

The compiled Cython core (``_fastcore``) is preferred when it built; the
pure numpy module is the fallback and the reference for semantics. Set
``CLOUDADAPT_NO_EXT=1`` to force the numpy backend (used by the benchmark
and by tests that compare the two).
"""

import os

from . import _numpy

if os.environ.get("CLOUDADAPT_NO_EXT"):
    _impl = _numpy
else:
    try:
        from . import _fastcore as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _numpy

BACKEND = _impl.BACKEND
pairwise_sqdist = _impl.pairwise_sqdist
nearest_neighbor = _impl.nearest_neighbor
knn_indices = _impl.knn_indices
fps_indices = _impl.fps_indices

__all__ = [
    "BACKEND",
    "pairwise_sqdist",
    "nearest_neighbor",
    "knn_indices",
    "fps_indices",
]
