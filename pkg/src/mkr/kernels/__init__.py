"""Hot-kernel dispatch: compiled extension when built, numpy otherwise.

Set MKR_PURE_PYTHON=1 to force the numpy backend (useful for debugging and
for the benchmark's baseline column).
"""

from __future__ import annotations

import os

from . import numpy_backend


def load_compiled():
    """Return the compiled kernel module, or None if it was never built."""
    try:
        from . import _core
    except ImportError:
        return None
    return _core


if os.environ.get("MKR_PURE_PYTHON"):
    _active = numpy_backend
else:
    _active = load_compiled() or numpy_backend

backend_name: str = _active.NAME

cross_compress_forward = _active.cross_compress_forward
cross_compress_backward = _active.cross_compress_backward
scatter_add_rows = _active.scatter_add_rows
