"""Instance perception: encoder to instance embeddings, decoder back to foreground masks."""

from __future__ import annotations

import numpy as np

from fsar import tensor as T
from fsar.errors import DimensionError
from fsar.nn import Conv2d, Module
from fsar.tensor import Tensor


class InstanceEncoder(Module):
    """Two conv3x3/s1 + relu layers, C -> C -> C; shape preserving."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, 1, 1, rng)
        self.conv2 = Conv2d(channels, channels, 3, 1, 1, rng)

    def __call__(self, f_img: Tensor) -> Tensor:
        return ipe_forward(self, f_img)


# expected foreground fraction; the output bias starts at its logit so the
# first updates do not have to drag every pixel down towards background
FOREGROUND_PRIOR = 0.1


class InstanceDecoder(Module):
    """conv -> relu -> up2x -> conv -> relu -> up2x -> conv(1) -> sigmoid."""

    def __init__(self, channels: int, rng: np.random.Generator, prior: float = FOREGROUND_PRIOR):
        self.conv1 = Conv2d(channels, channels, 3, 1, 1, rng)
        self.conv2 = Conv2d(channels, channels, 3, 1, 1, rng)
        self.conv3 = Conv2d(channels, 1, 3, 1, 1, rng)
        self.conv3.bias.data[:] = np.log(prior / (1.0 - prior))

    def __call__(self, f_ins: Tensor) -> Tensor:
        return ipd_forward(self, f_ins)


def _frames_flat(x: Tensor) -> tuple[Tensor, tuple]:
    if x.ndim < 3:
        raise DimensionError(f"expected [..., C, H, W] features, got {x.shape}")
    return T.reshape(x, (-1,) + x.shape[-3:]), x.shape[:-3]


def ipe_forward(enc: InstanceEncoder, f_img: Tensor) -> Tensor:
    x, lead = _frames_flat(f_img)
    x = T.relu(enc.conv1(x))
    x = T.relu(enc.conv2(x))
    return T.reshape(x, lead + x.shape[1:])


def ipd_forward(dec: InstanceDecoder, f_ins: Tensor) -> Tensor:
    x, lead = _frames_flat(f_ins)
    x = T.upsample_nearest2x(T.relu(dec.conv1(x)))
    x = T.upsample_nearest2x(T.relu(dec.conv2(x)))
    x = T.sigmoid(dec.conv3(x))
    return T.reshape(x, lead + x.shape[1:])


def mask_loss(target, pred: Tensor) -> Tensor:
    """Mean squared error over every pixel and frame, averaged over videos.

    With equally sized videos this is the plain mean over all elements.
    """
    target = T.as_tensor(target)
    if target.shape != pred.shape:
        raise DimensionError(f"mask_loss shapes differ: target {target.shape}, pred {pred.shape}")
    return T.mean(T.square(T.sub(pred, target)))
