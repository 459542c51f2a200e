"""Training losses: masked L1, a multi-scale perceptual proxy, and Dice.

The perceptual term replaces an external pretrained encoder with something
self-contained that still widens the receptive field: L1 on a pyramid of
2x average-pooled images plus L1 on their finite-difference gradients.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

Array = np.ndarray

DICE_EPS = 1e-6
PERCEPTUAL_LEVELS = 3


def _check_same_shape(a, b):
    if tuple(np.shape(a if isinstance(a, np.ndarray) else a.values)) != \
            tuple(np.shape(b if isinstance(b, np.ndarray) else b.values)):
        raise ValueError("image shape mismatch")


def loss_l1(render: ad.Tensor, target: Array, mask: Array = None) -> ad.Tensor:
    """Mean absolute difference, restricted to the foreground mask when given."""
    render = ad.as_tensor(render)
    target = np.asarray(target, dtype=np.float64)
    _check_same_shape(render, target)
    diff = ad.absolute(ad.sub(render, target))
    if mask is None:
        return ad.mean(diff)
    mask = np.asarray(mask, dtype=np.float64)
    weights = mask[..., None] if diff.values.ndim == mask.ndim + 1 else mask
    denom = max(float(weights.sum()) * (diff.values.size / weights.size), 1.0)
    return ad.mul(ad.tensor_sum(ad.mul(diff, weights)), 1.0 / denom)


def avg_pool2(img: ad.Tensor) -> ad.Tensor:
    """2x2 average pooling on (H, W, C); H and W must be even."""
    img = ad.as_tensor(img)
    h, w, c = img.values.shape

    def forward(x):
        return [x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))], None

    def backward(_, grads):
        g = grads[0]
        up = np.broadcast_to(g[:, None, :, None, :] / 4.0,
                             (h // 2, 2, w // 2, 2, c)).reshape(h, w, c)
        return [up]

    return ad.custom_op([img], forward, backward, name="avg_pool2")[0]


def _image_gradient_l1(a: ad.Tensor, b: Array) -> ad.Tensor:
    """L1 between horizontal+vertical finite differences of two images."""
    bx = b[:, 1:, :] - b[:, :-1, :]
    by = b[1:, :, :] - b[:-1, :, :]
    ax = ad.sub(ad.getitem(a, (slice(None), slice(1, None))),
                ad.getitem(a, (slice(None), slice(0, -1))))
    ay = ad.sub(ad.getitem(a, (slice(1, None),)),
                ad.getitem(a, (slice(0, -1),)))
    return ad.add(ad.mean(ad.absolute(ad.sub(ax, bx))),
                  ad.mean(ad.absolute(ad.sub(ay, by))))


def loss_perceptual(render: ad.Tensor, target: Array,
                    levels: int = PERCEPTUAL_LEVELS) -> ad.Tensor:
    """Pyramid L1 + gradient L1 over dyadic downsampling levels."""
    render = ad.as_tensor(render)
    target = np.asarray(target, dtype=np.float64)
    _check_same_shape(render, target)
    if min(target.shape[0], target.shape[1]) < 2 ** levels:
        raise ValueError(f"images must be at least {2 ** levels} pixels per side")

    total = None
    a, b = render, target
    for _ in range(levels):
        a = avg_pool2(a)
        b = b.reshape(b.shape[0] // 2, 2, b.shape[1] // 2, 2, b.shape[2]).mean(axis=(1, 3))
        term = ad.add(ad.mean(ad.absolute(ad.sub(a, b))), _image_gradient_l1(a, b))
        total = term if total is None else ad.add(total, term)
    return total


def loss_dice(mask_render: ad.Tensor, mask_target: Array,
              eps: float = DICE_EPS) -> ad.Tensor:
    """1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)."""
    p = ad.as_tensor(mask_render)
    g = np.asarray(mask_target, dtype=np.float64)
    _check_same_shape(p, g)
    inter = ad.tensor_sum(ad.mul(p, g))
    denom = ad.add(ad.tensor_sum(p), float(g.sum()) + eps)
    return ad.sub(1.0, ad.div(ad.add(ad.mul(inter, 2.0), eps), denom))


def psnr(render: Array, target: Array) -> float:
    """Peak signal-to-noise ratio over the full image, peak = 1."""
    mse = float(np.mean((np.asarray(render) - np.asarray(target)) ** 2))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))
