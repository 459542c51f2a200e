"""Pose-dependent non-rigid SE(3) field applied after skinning.

The field maps an encoded canonical position plus a pose feature to a small
correction transform.  Three output heads are supported: translation only,
rigid (quaternion + translation, the default), and full affine.  The output
layer is zero-initialized, so a fresh field is exactly the identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .geometry import AffineTransform3, Pose, rodrigues
from .mlp import Mlp, init_mlp, mlp_forward_np, mlp_forward_tape
from .tapemath import quat_rotmat_op, rodrigues_op

Array = np.ndarray

VARIANTS = ("t", "r", "a")
_HEAD_DIMS = {"t": 3, "r": 7, "a": 12}


@dataclass(frozen=True)
class PositionalEncoding:
    """gamma(x) = [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin/cos(2^(L-1) pi x)]."""

    num_frequencies: int
    include_input: bool = True

    @property
    def out_dim(self) -> int:
        return 3 * (2 * self.num_frequencies + int(self.include_input))


def encode_position(x: Array, enc: PositionalEncoding) -> Array:
    """Encode points (..., 3) -> (..., out_dim)."""
    x = np.asarray(x, dtype=np.float64)
    parts = [x] if enc.include_input else []
    for level in range(enc.num_frequencies):
        arg = x * (np.pi * 2.0 ** level)
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    if not parts:
        return np.zeros(x.shape[:-1] + (0,))
    return np.concatenate(parts, axis=-1)


def encode_position_tape(x: ad.Tensor, enc: PositionalEncoding) -> ad.Tensor:
    parts = [x] if enc.include_input else []
    for level in range(enc.num_frequencies):
        arg = ad.mul(x, np.pi * 2.0 ** level)
        parts.append(ad.sin(arg))
        parts.append(ad.cos(arg))
    return ad.concat(parts, axis=-1)


def encode_jacobian(x: Array, enc: PositionalEncoding) -> Array:
    """d gamma / dx at a single point: (out_dim, 3)."""
    x = np.asarray(x, dtype=np.float64)
    blocks = [np.eye(3)] if enc.include_input else []
    for level in range(enc.num_frequencies):
        f = np.pi * 2.0 ** level
        blocks.append(np.diag(f * np.cos(f * x)))
        blocks.append(np.diag(-f * np.sin(f * x)))
    if not blocks:
        return np.zeros((0, 3))
    return np.concatenate(blocks, axis=0)


@dataclass(frozen=True, eq=False)
class PoseFeature:
    """Flattened (rodrigues(theta_j) - I) blocks over all non-root joints."""

    values: Array  # (9 * (J - 1),)


def pose_feature(pose: Pose) -> PoseFeature:
    theta = pose.joint_rotations[1:]
    if len(theta) == 0:
        return PoseFeature(np.zeros(0))
    blocks = rodrigues(theta) - np.eye(3)
    return PoseFeature(blocks.reshape(-1))


def pose_feature_tape(theta: ad.Tensor, n_joints: int) -> ad.Tensor:
    """(J, 3) pose tensor -> (1, 9*(J-1)) feature row, root excluded."""
    rest = ad.getitem(theta, slice(1, n_joints))
    rots = rodrigues_op(rest)
    flat = ad.reshape(ad.sub(rots, np.eye(3)), (1, 9 * (n_joints - 1)))
    return flat


@dataclass(eq=False)
class DeformMlp:
    """The non-rigid field: MLP over [gamma(x); pose feature] with a variant head."""

    mlp: Mlp
    variant: str
    encoding: PositionalEncoding
    n_joints: int

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def head_dim(self) -> int:
        return _HEAD_DIMS[self.variant]


def new_deform_mlp(n_joints: int, variant: str = "r", hidden: int = 128,
                   hidden_layers: int = 4, num_frequencies: int = 6,
                   seed: int = 0) -> DeformMlp:
    enc = PositionalEncoding(num_frequencies)
    in_dim = enc.out_dim + 9 * (n_joints - 1)
    dims = [in_dim] + [hidden] * hidden_layers + [_HEAD_DIMS[variant]]
    rng = np.random.default_rng(seed)
    return DeformMlp(mlp=init_mlp(dims, rng, zero_last=True, name="deform"),
                     variant=variant, encoding=enc, n_joints=n_joints)


def _head_to_transform_tape(head: ad.Tensor, variant: str,
                            n: int) -> Tuple[Optional[ad.Tensor], ad.Tensor]:
    """Split the raw head into (A | None, t).  A is None for the T variant."""
    if variant == "t":
        return None, head
    if variant == "r":
        quat = ad.getitem(head, (slice(None), slice(0, 4)))
        t = ad.getitem(head, (slice(None), slice(4, 7)))
        return quat_rotmat_op(quat, w_offset=1.0), t
    delta = ad.reshape(ad.getitem(head, (slice(None), slice(0, 9))), (n, 3, 3))
    t = ad.getitem(head, (slice(None), slice(9, 12)))
    return ad.add(delta, np.eye(3)), t


def nonrigid_tape(x: ad.Tensor, theta: ad.Tensor,
                  field: DeformMlp) -> Tuple[Optional[ad.Tensor], ad.Tensor]:
    """Batched field evaluation on the tape: (A (N,3,3) or None, t (N,3))."""
    n = x.values.shape[0]
    gx = encode_position_tape(x, field.encoding)
    pf = pose_feature_tape(theta, field.n_joints)
    h = ad.concat([gx, ad.expand_rows(pf, n)], axis=1)
    head = mlp_forward_tape(field.mlp, h)
    return _head_to_transform_tape(head, field.variant, n)


def nonrigid_transform(x_canonical: Array, pose: Pose, field: DeformMlp) -> AffineTransform3:
    """Evaluate the field at one canonical point for one pose."""
    xs = ad.constant(np.asarray(x_canonical, dtype=np.float64)[None])
    theta = ad.constant(pose.joint_rotations)
    A, t = nonrigid_tape(xs, theta, field)
    linear = np.eye(3) if A is None else A.values[0]
    return AffineTransform3(linear, t.values[0])


def apply_nonrigid(skinned: Tuple[Array, Array],
                   nr: AffineTransform3) -> Tuple[Array, Array]:
    """Compose the non-rigid correction onto a skinned point.

    Given (point, M_linear) from forward skinning, returns the corrected point
    and the total linear map A @ M that transports the covariance.
    """
    point, m_linear = skinned
    out_point = nr.linear @ np.asarray(point, dtype=np.float64) + nr.translation
    return out_point, nr.linear @ np.asarray(m_linear, dtype=np.float64)


# ---------------------------------------------------------------------------
# numpy twin for inference
# ---------------------------------------------------------------------------

def nonrigid_batch_np(xs: Array, pose_theta: Array, field: DeformMlp):
    """(A (N,3,3) or None, t (N,3)) without the tape; mirrors nonrigid_tape."""
    n = len(xs)
    gx = encode_position(xs, field.encoding)
    blocks = rodrigues(pose_theta[1:]) - np.eye(3)
    pf = np.broadcast_to(blocks.reshape(1, -1), (n, 9 * (field.n_joints - 1)))
    h = np.concatenate([gx, pf], axis=1)
    head = mlp_forward_np(field.mlp.layer_arrays(), h)
    if field.variant == "t":
        return None, head
    if field.variant == "r":
        from .geometry import quaternion_to_matrix
        return quaternion_to_matrix(head[:, :4], w_offset=1.0), head[:, 4:7]
    A = head[:, :9].reshape(n, 3, 3) + np.eye(3)
    return A, head[:, 9:12]
