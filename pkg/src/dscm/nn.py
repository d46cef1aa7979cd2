"""Dense networks used as context networks, encoders and decoders."""

from __future__ import annotations

import numpy as np

from .numerics import Tensor, as_tensor

__all__ = ["Dense", "MLP"]


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "dense", gain: float = 1.0):
        bound = gain * np.sqrt(6.0 / (n_in + n_out))
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MLP:
    """Fully connected network; ``sizes`` lists input, hidden and output widths.

    With no hidden layers this is a single linear map. Hidden layers use a
    leaky ReLU, the output layer is linear.
    """

    def __init__(self, sizes, rng: np.random.Generator, slope: float = 0.1, name: str = "mlp", out_gain: float = 1.0):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"MLP needs at least input and output sizes, got {sizes}")
        self.sizes = sizes
        self.slope = slope
        self.name = name
        n = len(sizes) - 1
        self.layers = [
            Dense(a, b, rng, name=f"{name}.{k}", gain=out_gain if k == n - 1 else 1.0)
            for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"{self.name}: expected input of shape (N, {self.n_in}), got {x.shape}")
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < last:
                x = x.leaky_relu(self.slope)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]
