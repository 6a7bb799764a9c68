"""Hot convolution kernels.

The compiled Cython core is used when it was built; otherwise the numpy
fallback is selected. Set ``RFIDLAB_PURE_PYTHON=1`` to force the fallback.
Both backends return bit-identical results.
"""

import os

from . import _pykernels

BACKEND = "python"
if os.environ.get("RFIDLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        _ckernels = None
    else:
        BACKEND = "cython"
else:
    _ckernels = None

if _ckernels is not None:
    im2col = _ckernels.im2col
    col2im = _ckernels.col2im
else:
    im2col = _pykernels.im2col
    col2im = _pykernels.col2im

__all__ = ["BACKEND", "im2col", "col2im"]
