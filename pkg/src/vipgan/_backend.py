"""Kernel backend selection.

The compiled extension is used when it has been built; otherwise the numpy
fallback is imported. Set ``VIPGAN_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("VIPGAN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
raster_triangles = _impl.raster_triangles

__all__ = ["BACKEND", "im2col", "col2im", "raster_triangles"]
