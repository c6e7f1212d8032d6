"""Kernel backend selection.

The compiled Cython extension is preferred; a pure-numpy fallback keeps the
package functional without a compiler.  Set MVCOUNT_BACKEND=numpy (or cython)
to force a backend; forcing cython raises if the extension is missing.
"""

import os

from . import _numpy

_requested = os.environ.get("MVCOUNT_BACKEND", "").lower()

if _requested == "numpy":
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _numpy
        BACKEND = "numpy"

conv2d_fwd = _impl.conv2d_fwd
conv2d_bwd_x = _impl.conv2d_bwd_x
conv2d_bwd_w = _impl.conv2d_bwd_w
maxpool2_fwd = _impl.maxpool2_fwd
maxpool2_bwd = _impl.maxpool2_bwd
bilinear_gather = _impl.bilinear_gather
bilinear_scatter = _impl.bilinear_scatter

backends = {"numpy": _numpy}
try:
    from . import _core

    backends["cython"] = _core
except ImportError:
    pass
