"""Interval kernel dispatch.

The compiled extension is used when it imports; otherwise the pure-Python
module takes over. Set ``TWOSUBNET_TAL_PURE=1`` to force the fallback.
"""
import os

if os.environ.get("TWOSUBNET_TAL_PURE", "") not in ("", "0"):
    from . import _kernels_py as _impl
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as _impl
        BACKEND = "python"

tiou_matrix = _impl.tiou_matrix
nms = _impl.nms
match_detections = _impl.match_detections
threshold_runs = _impl.threshold_runs

__all__ = ["BACKEND", "tiou_matrix", "nms", "match_detections", "threshold_runs"]
