"""Pure-numpy im2col / col2im, used when the compiled extension is absent."""

import numpy as np


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    B, C, H, W = x.shape
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.empty((C, kh, kw, B, oh, ow), dtype=np.float64)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            out[:, i, j] = xt[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return out.reshape(C * kh * kw, B * oh * ow)


def col2im(cols: np.ndarray, B: int, C: int, H: int, W: int,
           kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    c6 = cols.reshape(C, kh, kw, B, oh, ow).transpose(3, 0, 1, 2, 4, 5)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += c6[:, :, i, j]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:-pad, pad:-pad])
    return xp
