"""Kernel backend selection.

The compiled extension is used when it imports cleanly; set
``EKGNET_PURE_PYTHON=1`` to force the numpy fallback.  ``BACKEND`` names the
active choice.
"""
import os

from . import _kernels_py

if os.environ.get("EKGNET_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

vol2col = _impl.vol2col
col2vol = _impl.col2vol
avg_pool3d_forward = _impl.avg_pool3d_forward
avg_pool3d_backward = _impl.avg_pool3d_backward
conv3d_fwd = _impl.conv3d_fwd
conv3d_bwd_data = _impl.conv3d_bwd_data
conv3d_bwd_weight = _impl.conv3d_bwd_weight

__all__ = ["BACKEND", "vol2col", "col2vol", "avg_pool3d_forward", "avg_pool3d_backward",
           "conv3d_fwd", "conv3d_bwd_data", "conv3d_bwd_weight"]
