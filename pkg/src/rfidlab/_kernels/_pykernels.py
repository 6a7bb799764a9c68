"""Pure-numpy patch extraction/scatter, used when the compiled core is absent."""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold ``x`` (N, C, H, W) into rows of patches, shape (N*OH*OW, C*kh*kw)."""
    x = np.ascontiguousarray(x)
    N, C, H, W = x.shape
    oh = _out_size(H, kh, stride, pad)
    ow = _out_size(W, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = x.strides
    view = as_strided(
        x,
        shape=(N, oh, ow, C, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return view.reshape(N * oh * ow, C * kh * kw)


def col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an image."""
    N, C, H, W = shape
    oh = _out_size(H, kh, stride, pad)
    ow = _out_size(W, kw, stride, pad)
    cols6 = cols.reshape(N, oh, ow, C, kh, kw)
    out = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    # reverse offset order matches the compiled core's summation order
    for i in reversed(range(kh)):
        for j in reversed(range(kw)):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                cols6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(out)
