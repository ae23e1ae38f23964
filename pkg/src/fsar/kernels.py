"""Backend selection for the convolution kernels.

The compiled extension is preferred; set ``FSAR_KERNELS=python`` to force the
numpy fallback.  ``BACKEND`` names the active implementation.
"""

import os

import numpy as np

from fsar import _pykernels

try:
    if os.environ.get("FSAR_KERNELS", "").lower() == "python":
        raise ImportError("numpy fallback forced")
    from fsar import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold ``[B, C, H, W]`` into ``[C*kh*kw, B*OH*OW]`` patch columns."""
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad)


def col2im(cols: np.ndarray, B: int, C: int, H: int, W: int, kh: int, kw: int,
           stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back to ``[B, C, H, W]``."""
    return _impl.col2im(np.ascontiguousarray(cols, dtype=np.float64), B, C, H, W, kh, kw, stride, pad)
