"""Plain fully-connected nets used by the deformation and color fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

Array = np.ndarray


@dataclass
class Mlp:
    """Stacked (weight, bias) pairs; ReLU between layers, linear output.

    Weights are tape parameters so gradient slots live on the tensors.
    """

    weights: list[ad.Tensor]
    biases: list[ad.Tensor]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[ad.Tensor]:
        return list(self.weights) + list(self.biases)

    def layer_arrays(self) -> list[tuple[Array, Array]]:
        return [(w.values, b.values) for w, b in zip(self.weights, self.biases)]


def init_mlp(dims: list[int], rng: np.random.Generator, zero_last: bool = False,
             name: str = "mlp") -> Mlp:
    """He-initialized MLP with the given layer sizes.

    ``zero_last`` zeroes the output layer so the net starts as the constant
    zero map (used to make deformation fields exact identities at init).
    """
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        last = i == len(dims) - 2
        if last and zero_last:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.normal(size=(fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        weights.append(ad.parameter(w, name=f"{name}.w{i}"))
        biases.append(ad.parameter(np.zeros(fan_out), name=f"{name}.b{i}"))
    return Mlp(weights, biases)


def mlp_forward_tape(mlp: Mlp, x: ad.Tensor) -> ad.Tensor:
    h = x
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = ad.add(ad.matmul(h, w), b)
        if i < mlp.n_layers - 1:
            h = ad.relu(h)
    return h


def mlp_forward_np(layers: list[tuple[Array, Array]], x: Array) -> Array:
    """Numpy twin of the tape forward; identical op order keeps values bit-equal."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = np.matmul(h, w) + b
        if i < len(layers) - 1:
            h = np.where(h > 0, h, 0.0)
    return h
