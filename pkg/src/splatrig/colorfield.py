"""Neural color field over canonical coordinates.

Colors come from an MLP on encoded positions instead of per-Gaussian values;
nearby Gaussians therefore share color structure, and the field's spatial
Jacobian feeds an extra supervision term into the mean gradients:

    dL/dx = dL/dx|render + (dC/dx)^T dL/dC

Only training queries the network; at inference the colors are baked once
into a cache keyed by the Gaussian-set generation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import GaussianSet
from .mlp import Mlp, init_mlp, mlp_forward_np, mlp_forward_tape
from .deform import PositionalEncoding, encode_jacobian, encode_position, encode_position_tape
from .optim import AdamState, adam_step

Array = np.ndarray


@dataclass(eq=False)
class ColorMlp:
    """MLP from encoded canonical position to RGB through a sigmoid."""

    mlp: Mlp
    encoding: PositionalEncoding


@dataclass(frozen=True, eq=False)
class ColorCache:
    """Baked per-Gaussian colors, valid only for a matching generation."""

    colors: Array
    generation: int

    def validate(self, gaussians: GaussianSet):
        if gaussians.generation != self.generation:
            raise ValueError(
                f"stale color cache: generation {self.generation} vs "
                f"gaussian set {gaussians.generation}")


def new_color_mlp(hidden: int = 128, hidden_layers: int = 4,
                  num_frequencies: int = 10, seed: int = 0) -> ColorMlp:
    enc = PositionalEncoding(num_frequencies)
    dims = [enc.out_dim] + [hidden] * hidden_layers + [3]
    rng = np.random.default_rng(seed)
    return ColorMlp(mlp=init_mlp(dims, rng, name="color"), encoding=enc)


def query_color(x: Array, field: ColorMlp) -> Array:
    """RGB in (0,1)^3 at canonical point(s) x; pure and deterministic."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = mlp_forward_np(field.mlp.layer_arrays(), encode_position(np.atleast_2d(x), field.encoding))
    out = 1.0 / (1.0 + np.exp(-h))
    return out[0] if single else out


def color_tape(x: ad.Tensor, field: ColorMlp) -> ad.Tensor:
    return ad.sigmoid(mlp_forward_tape(field.mlp, encode_position_tape(x, field.encoding)))


def color_jacobian(x: Array, field: ColorMlp) -> Array:
    """Analytic dC/dx (3, 3) at one point, via layer-by-layer Jacobian products.

    Deliberately independent of the reverse-mode tape so the two gradient
    routes can be compared against each other.
    """
    x = np.asarray(x, dtype=np.float64)
    layers = field.mlp.layer_arrays()
    h = encode_position(x, field.encoding)
    jac = encode_jacobian(x, field.encoding)          # (E, 3)
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        jac = w.T @ jac
        if i < len(layers) - 1:
            mask = z > 0
            h = np.where(mask, z, 0.0)
            jac = jac * mask[:, None]
        else:
            s = 1.0 / (1.0 + np.exp(-z))
            jac = (s * (1.0 - s))[:, None] * jac
    return jac


def mean_gradient_with_color_term(dl_dx_render: Array, dl_dc: Array, jac: Array) -> Array:
    """Assemble the full mean gradient: renderer term plus J^T dL/dC."""
    return np.asarray(dl_dx_render, dtype=np.float64) + np.asarray(jac).T @ np.asarray(dl_dc, dtype=np.float64)


def pretrain_color_field(samples, field: ColorMlp, steps: int = 800,
                         lr: float = 1e-3, batch_size: int = 4096,
                         seed: int = 0) -> float:
    """Fit the field to (point, RGB) pairs by minibatch Adam on MSE.

    Returns the final MSE over the full sample set.
    """
    points = np.asarray([s[0] for s in samples], dtype=np.float64)
    targets = np.asarray([s[1] for s in samples], dtype=np.float64)
    if len(points) == 0:
        raise ValueError("empty sample set")

    rng = np.random.default_rng(seed)
    params = field.mlp.parameters()
    states = [AdamState.for_shape(p.values.shape, lr=lr, name=p.name) for p in params]
    n = len(points)
    bs = min(batch_size, n)

    for _ in range(steps):
        idx = rng.integers(0, n, size=bs) if bs < n else np.arange(n)
        x = ad.constant(points[idx])
        pred = color_tape(x, field)
        err = ad.sub(pred, targets[idx])
        loss = ad.mean(ad.mul(err, err))
        ad.backward(loss)
        for p, st in zip(params, states):
            grad = p.grad if p.grad is not None else np.zeros_like(p.values)
            p.values = adam_step(p.values, grad, st)
            p.zero_grad()

    final = query_color(points, field)
    return float(np.mean((final - targets) ** 2))


def bake_color_cache(gaussians: GaussianSet, field: ColorMlp) -> ColorCache:
    """Query the field once per Gaussian; valid until the set is edited."""
    return ColorCache(colors=query_color(gaussians.means, field),
                      generation=gaussians.generation)
