"""Parameterised layers. Parameter names follow ``module.layer.kind`` dotted paths."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad


class Conv:
    """Channel-last convolution layer with a (*window, C_in, C_out) kernel."""

    def __init__(self, name: str, window, in_channels: int, out_channels: int, rng, stride: int = 1, padding=None):
        window = tuple(window)
        fan_in = in_channels * math.prod(window)
        bound = math.sqrt(3.0 / fan_in)
        self.name = name
        self.stride = stride
        self.padding = (window[0] // 2) if padding is None else padding
        self.weight = ad.Tensor(rng.uniform(-bound, bound, size=window + (in_channels, out_channels)), requires_grad=True, name=f"{name}.weight")
        self.bias = ad.Tensor(np.zeros(out_channels), requires_grad=True, name=f"{name}.bias")

    def parameters(self) -> dict[str, ad.Tensor]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        if all(k == 1 for k in self.weight.shape[:-2]) and self.stride == 1:
            # pointwise: a plain affine map over the channel axis
            w = ad.reshape(self.weight, self.weight.shape[-2:])
            return ad.affine(x, w, self.bias)
        return ad.conv(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def at(self, x: ad.Tensor, positions: np.ndarray) -> ad.Tensor:
        """Outputs only at the given (n, nd) positions; stride must be 1."""
        if self.stride != 1:
            raise ValueError("sparse evaluation needs stride 1")
        return ad.conv_at(x, self.weight, self.bias, positions, self.padding)
