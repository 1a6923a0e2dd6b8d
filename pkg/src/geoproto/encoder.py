"""Small shared convolutional feature extractor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import DiffTensor, ShapeError

DEFAULT_CHANNELS = (16, 16, 32, 32)
DEFAULT_STRIDES = (1, 2, 1, 2)


def he_kernel(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    fan_in = c_in * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))


@dataclass
class EncoderParams:
    kernels: list[DiffTensor]
    biases: list[DiffTensor]
    strides: tuple[int, ...] = DEFAULT_STRIDES

    @classmethod
    def init(cls, rng: np.random.Generator, in_channels: int = 1,
             channels=DEFAULT_CHANNELS, strides=DEFAULT_STRIDES) -> "EncoderParams":
        if len(channels) != len(strides):
            raise ValueError("channels and strides must have equal length")
        kernels, biases = [], []
        c_prev = in_channels
        for i, c in enumerate(channels):
            kernels.append(nx.param(he_kernel(rng, c, c_prev, 3), name=f"conv{i}.weight"))
            biases.append(nx.param(np.zeros(c), name=f"conv{i}.bias"))
            c_prev = c
        return cls(kernels, biases, tuple(strides))

    @property
    def out_channels(self) -> int:
        return self.kernels[-1].shape[0]

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    def tensors(self) -> dict[str, DiffTensor]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"conv{i}.weight"] = k
            out[f"conv{i}.bias"] = b
        return out


def encode(image: DiffTensor, params: EncoderParams) -> DiffTensor:
    """Map a 1 x H x W image to a C x H/s x W/s feature map (s = total stride).

    3x3 convolutions with padding 1, each followed by ReLU.
    """
    image = image if isinstance(image, DiffTensor) else DiffTensor(image)
    if image.ndim == 2:
        image = image.reshape(1, *image.shape)
    s = params.total_stride
    _, H, W = image.shape
    if H % s or W % s:
        raise ShapeError(f"image {H}x{W} not divisible by encoder stride {s}")
    x = image
    for k, b, st in zip(params.kernels, params.biases, params.strides):
        x = nx.relu(nx.conv2d(x, k, b, stride=st, padding=1))
    return x
