import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError


class Linear:
    """Affine map ``x @ W + b`` with fan-in uniform initialization."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(n_in) if n_in > 0 else 0.0
        self.weight = ad.parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = ad.parameter(rng.uniform(-bound, bound, size=(n_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), ad.repeat_rows(self.bias, x.shape[0]))

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class MLP:
    """Stack of Linear layers with GELU between them (none after the last)."""

    def __init__(self, widths: list[int], rng: np.random.Generator):
        if len(widths) < 2:
            raise DimensionError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last:
                x = ad.gelu(x)
        return x

    @property
    def output_layer(self) -> Linear:
        return self.layers[-1]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            params.update(layer.named_parameters(f"{prefix}.{i}"))
        return params
