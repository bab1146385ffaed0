"""Small parameterized building blocks shared by the sensor and BEV stacks."""
from __future__ import annotations

import numpy as np

from .tensorcore import Parameter, Tensor, conv2d


class ConvLayer:
    """``k x k`` convolution with bias, same padding for odd kernels, optional ReLU."""

    def __init__(self, name: str, cin: int, cout: int, k: int = 3, stride: int = 1,
                 relu: bool = True, rng: np.random.Generator | None = None, gain: float = 2.0):
        self.name = name
        self.cin, self.cout, self.k, self.stride, self.relu = cin, cout, k, stride, relu
        self.padding = k // 2
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(gain / (k * k * cin))
        self.weight = Parameter(f"{name}.w", rng.standard_normal((k, k, cin, cout)) * std)
        self.bias = Parameter(f"{name}.b", np.zeros(cout))

    @property
    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, relu=self.relu)

    def out_size(self, n: int) -> int:
        return (n + 2 * self.padding - self.k) // self.stride + 1


def apply_stack(x: Tensor, layers: list[ConvLayer]) -> Tensor:
    for layer in layers:
        x = layer(x)
    return x
