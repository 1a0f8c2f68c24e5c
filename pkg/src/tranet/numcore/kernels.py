"""Kernel backend selection.

The compiled Cython module is used when it was built; otherwise the numpy
implementation is loaded.  Set ``TRANET_PURE_PYTHON=1`` to force the fallback.
"""

import os

if os.environ.get("TRANET_PURE_PYTHON", "") not in ("", "0"):
    from tranet.numcore import _pykernels as _impl

    BACKEND = "python"
else:
    try:
        from tranet.numcore import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        from tranet.numcore import _pykernels as _impl

        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward

__all__ = ["BACKEND", "im2col", "col2im", "maxpool_forward", "maxpool_backward"]
