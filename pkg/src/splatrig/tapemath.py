"""Tape wrappers around the hand-derived rotation kernels."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .geometry import (quaternion_to_matrix, quaternion_to_matrix_backward,
                       rodrigues, rodrigues_backward)


def rodrigues_op(axis_angle: ad.Tensor) -> ad.Tensor:
    """(..., 3) axis-angle tensor -> (..., 3, 3) rotation matrices."""

    def forward(v):
        return [rodrigues(v)], v

    def backward(v, grads):
        return [rodrigues_backward(v, grads[0])]

    return ad.custom_op([axis_angle], forward, backward, name="rodrigues")[0]


def quat_rotmat_op(quat: ad.Tensor, w_offset: float = 0.0) -> ad.Tensor:
    """(..., 4) quaternion tensor -> (..., 3, 3); normalizes internally.

    With ``w_offset=1`` a raw zero head output yields the exact identity.
    """

    def forward(q):
        return [quaternion_to_matrix(q, w_offset=w_offset)], q

    def backward(q, grads):
        return [quaternion_to_matrix_backward(q, grads[0], w_offset=w_offset)]

    return ad.custom_op([quat], forward, backward, name="quat_rotmat")[0]
