"""Convolution lowering kernels with import-time backend selection.

The compiled extension ``mdil._kernels`` is used when it imports; otherwise the
numpy implementation in ``mdil._kernels_py`` is used. Set ``MDIL_PURE_PYTHON=1``
to force the fallback. Both backends produce bitwise identical results.
"""
import os

from mdil import _kernels_py

BACKEND = "python"
if os.environ.get("MDIL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from mdil import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    else:
        BACKEND = "compiled"
else:
    _compiled = None

if _compiled is not None:
    im2col = _compiled.im2col
    col2im = _compiled.col2im
else:
    im2col = _kernels_py.im2col
    col2im = _kernels_py.col2im

out_extent = _kernels_py.out_extent

__all__ = ["BACKEND", "im2col", "col2im", "out_extent"]
