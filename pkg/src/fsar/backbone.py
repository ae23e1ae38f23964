"""Small per-frame convolutional feature extractor (no global pooling)."""

from __future__ import annotations

import numpy as np

from fsar import tensor as T
from fsar.errors import DimensionError
from fsar.nn import Conv2d, Module
from fsar.tensor import Tensor

FRAME_SIZE = 32


class Backbone(Module):
    """conv3x3/s1 -> relu -> conv3x3/s2 -> relu -> conv3x3/s2 -> relu, 3 -> C -> C -> C.

    Maps ``[..., 3, 32, 32]`` frames to ``[..., C, 8, 8]`` feature maps, each
    frame independently.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(3, channels, 3, 1, 1, rng)
        self.conv2 = Conv2d(channels, channels, 3, 2, 1, rng)
        self.conv3 = Conv2d(channels, channels, 3, 2, 1, rng)
        self.channels = channels

    def __call__(self, frames: Tensor) -> Tensor:
        return extract_features(self, frames)


def extract_features(net: Backbone, frames: Tensor) -> Tensor:
    frames = T.as_tensor(frames)
    if frames.ndim < 3 or frames.shape[-3:] != (3, FRAME_SIZE, FRAME_SIZE):
        raise DimensionError(f"backbone expects [..., 3, {FRAME_SIZE}, {FRAME_SIZE}] frames, got {frames.shape}")
    lead = frames.shape[:-3]
    x = T.reshape(frames, (-1, 3, FRAME_SIZE, FRAME_SIZE))
    x = T.relu(net.conv1(x))
    x = T.relu(net.conv2(x))
    x = T.relu(net.conv3(x))
    return T.reshape(x, lead + x.shape[1:])
