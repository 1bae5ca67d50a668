"""Kernel backend selection.

The compiled extension is used when it imports; ``CTT_PURE_PYTHON=1`` forces
the numpy fallback (handy for benchmarking and debugging).
"""

import os

from . import _pykernels

BACKEND = "python"
kernels = _pykernels

if os.environ.get("CTT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as kernels  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        pass

im2col = kernels.im2col
col2im = kernels.col2im
maxpool2x2_forward = kernels.maxpool2x2_forward
maxpool2x2_backward = kernels.maxpool2x2_backward

__all__ = ["BACKEND", "im2col", "col2im", "maxpool2x2_forward", "maxpool2x2_backward"]
