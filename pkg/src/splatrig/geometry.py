"""Core avatar data types and the rotation / kinematics math shared by every module.

Conventions used throughout the library:
  - all scalars are float64 in the reference path
  - quaternions are (w, x, y, z), stored un-normalized and normalized at use sites
  - joint transforms are expressed relative to the rest pose, so the rest pose
    maps every point to itself
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

Array = np.ndarray


def _f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def rodrigues(axis_angle: Array) -> Array:
    """Axis-angle vector(s) (..., 3) to rotation matrix/matrices (..., 3, 3).

    Uses R = I + a(r) K + b(r) K^2 with K = [v]_x, a = sin(r)/r,
    b = (1 - cos(r))/r^2.  Switches to the Taylor series well above the
    1e-8 norm floor (at r < 1e-4) to dodge cancellation in b.
    """
    v = _f64(axis_angle)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite axis-angle input")
    r2 = np.sum(v * v, axis=-1)
    small = r2 < 1e-8
    r2_safe = np.where(small, 1.0, r2)
    r = np.sqrt(r2_safe)
    a = np.where(small, 1.0 - r2 / 6.0 + r2 * r2 / 120.0, np.sin(r) / r)
    b = np.where(small, 0.5 - r2 / 24.0 + r2 * r2 / 720.0, (1.0 - np.cos(r)) / r2_safe)

    K = _skew(v)
    K2 = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * K2


def rodrigues_backward(axis_angle: Array, d_rot: Array) -> Array:
    """Gradient of rodrigues: given dL/dR (..., 3, 3) return dL/dv (..., 3).

    Differentiates R = I + a K + b K^2 through the coefficients a, b and the
    skew map, with the same small-angle series switch as the forward pass.
    """
    v = _f64(axis_angle)
    g = _f64(d_rot)
    r2 = np.sum(v * v, axis=-1)
    small = r2 < 1e-8
    r2_safe = np.where(small, 1.0, r2)
    r = np.sqrt(r2_safe)

    # da/d(r^2) and db/d(r^2); chain via d(r^2)/dv_k = 2 v_k.
    sin_r, cos_r = np.sin(r), np.cos(r)
    da_dr2 = np.where(small, -1.0 / 6.0 + r2 / 60.0,
                      (r * cos_r - sin_r) / (2.0 * r2_safe * r))
    db_dr2 = np.where(small, -1.0 / 24.0 + r2 / 360.0,
                      (r * sin_r - 2.0 * (1.0 - cos_r)) / (2.0 * r2_safe * r2_safe))
    a = np.where(small, 1.0 - r2 / 6.0 + r2 * r2 / 120.0, sin_r / r)
    b = np.where(small, 0.5 - r2 / 24.0 + r2 * r2 / 720.0, (1.0 - cos_r) / r2_safe)

    K = _skew(v)
    K2 = K @ K
    gK = np.einsum("...ab,...ab->...", g, K)
    gK2 = np.einsum("...ab,...ab->...", g, K2)

    out = 2.0 * v * (da_dr2 * gK + db_dr2 * gK2)[..., None]
    # term from K itself: dK/dv_k = [e_k]_x ; dK2/dv_k = [e_k]_x K + K [e_k]_x
    basis = _skew(np.eye(3))  # (3, 3, 3): basis[k] = [e_k]_x
    dK_term = np.einsum("...ab,kab->...k", g, basis)
    dK2_term = np.einsum("...ab,kac,...cb->...k", g, basis, K) + \
        np.einsum("...ab,...ac,kcb->...k", g, K, basis)
    return out + a[..., None] * dK_term + b[..., None] * dK2_term


def _skew(v: Array) -> Array:
    """(..., 3) -> (..., 3, 3) cross-product matrices."""
    v = _f64(v)
    z = np.zeros(v.shape[:-1])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], axis=-1),
        np.stack([v[..., 2], z, -v[..., 0]], axis=-1),
        np.stack([-v[..., 1], v[..., 0], z], axis=-1),
    ], axis=-2)


def quaternion_to_matrix(quat: Array, w_offset: float = 0.0) -> Array:
    """Quaternion(s) (..., 4) in (w, x, y, z) order to rotation matrices.

    The optional ``w_offset`` is added to w before normalization, so a raw
    all-zero network output maps to the exact identity rotation.
    """
    q = _f64(quat).copy()
    q[..., 0] += w_offset
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-30):
        raise ValueError("zero-norm quaternion")
    q = q / n
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def quaternion_to_matrix_backward(quat: Array, d_rot: Array, w_offset: float = 0.0) -> Array:
    """Gradient of quaternion_to_matrix: dL/dR (..., 3, 3) -> dL/dq (..., 4)."""
    q = _f64(quat).copy()
    g = _f64(d_rot)
    q[..., 0] += w_offset
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    zz = np.zeros_like(w)

    def m(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dR_dw = 2.0 * m([[zz, -z, y], [z, zz, -x], [-y, x, zz]])
    dR_dx = 2.0 * m([[zz, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dR_dy = 2.0 * m([[-2 * y, x, w], [x, zz, z], [-w, z, -2 * y]])
    dR_dz = 2.0 * m([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zz]])

    du = np.stack([np.einsum("...ab,...ab->...", g, d) for d in (dR_dw, dR_dx, dR_dy, dR_dz)], axis=-1)
    # through normalization u = q / |q|
    return (du - u * np.sum(du * u, axis=-1, keepdims=True)) / n


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Gaussian:
    """A single canonical-space Gaussian primitive."""

    mean: Array                     # (3,)
    log_scale: Array                # (3,) log of per-axis std-dev
    rotation: Array                 # (4,) quaternion (w, x, y, z)
    opacity_logit: float
    color: Optional[Array] = None   # (3,) only in the per-Gaussian-color ablation


@dataclass(frozen=True, eq=False)
class GaussianSet:
    """The canonical avatar, stored struct-of-arrays for the numeric paths.

    ``generation`` is bumped by every density-control edit; anything derived
    from the set (skin field, color cache) carries the generation it was
    built against.
    """

    means: Array                    # (N, 3)
    log_scales: Array               # (N, 3)
    rotations: Array                # (N, 4)
    opacity_logits: Array           # (N,)
    colors: Optional[Array] = None  # (N, 3)
    generation: int = 0

    def __post_init__(self):
        for name in ("means", "log_scales", "rotations", "opacity_logits", "colors"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _f64(v))
        n = len(self.means)
        if self.log_scales.shape != (n, 3) or self.rotations.shape != (n, 4) \
                or self.opacity_logits.shape != (n,):
            raise ValueError("mismatched gaussian array shapes")
        if self.colors is not None and self.colors.shape != (n, 3):
            raise ValueError("mismatched color array shape")

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i],
            log_scale=self.log_scales[i],
            rotation=self.rotations[i],
            opacity_logit=float(self.opacity_logits[i]),
            color=None if self.colors is None else self.colors[i],
        )

    def __iter__(self) -> Iterator[Gaussian]:
        return (self[i] for i in range(len(self)))

    def opacities(self) -> Array:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def covariances(self) -> Array:
        """(N, 3, 3) canonical covariances R diag(exp(2 s)) R^T."""
        R = quaternion_to_matrix(self.rotations)
        S2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nab,nb,ncb->nac", R, S2, R)


def gaussian_covariance(g: Gaussian) -> Array:
    """Canonical 3x3 covariance of one Gaussian: R diag(exp(2 log_scale)) R^T."""
    fields = np.concatenate([g.mean, g.log_scale, g.rotation, [g.opacity_logit]])
    if not np.all(np.isfinite(fields)):
        raise ValueError("degenerate gaussian")
    R = quaternion_to_matrix(g.rotation)
    S2 = np.exp(2.0 * _f64(g.log_scale))
    return (R * S2) @ R.T


@dataclass(frozen=True, eq=False)
class RiggedTemplate:
    """Template mesh with joints, per-vertex blend weights and a kinematic tree."""

    vertices_canonical: Array       # (V, 3)
    faces: Array                    # (F, 3) int
    joints: Array                   # (J, 3) rest positions
    parent: Array                   # (J,) int, root = -1
    blend_weights: Array            # (V, J) rows sum to 1
    face_colors: Optional[Array] = None  # (F, 3)
    topo_order: Array = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "vertices_canonical", _f64(self.vertices_canonical))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64))
        object.__setattr__(self, "joints", _f64(self.joints))
        object.__setattr__(self, "parent", np.asarray(self.parent, dtype=np.int64))
        object.__setattr__(self, "blend_weights", _f64(self.blend_weights))
        if self.face_colors is not None:
            object.__setattr__(self, "face_colors", _f64(self.face_colors))
        self._validate()
        object.__setattr__(self, "topo_order", self._topological_order())

    def _validate(self):
        V, J = self.blend_weights.shape
        if self.vertices_canonical.shape != (V, 3):
            raise ValueError("blend_weights rows must match vertex count")
        if self.joints.shape != (J, 3) or self.parent.shape != (J,):
            raise ValueError("joint arrays must match blend_weights columns")
        if np.any(self.blend_weights < -1e-12):
            raise ValueError("blend weights must be non-negative")
        sums = self.blend_weights.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValueError("blend weight rows must sum to 1")
        if np.count_nonzero(self.parent == -1) != 1:
            raise ValueError("kinematic tree needs exactly one root")

    def _topological_order(self) -> Array:
        J = len(self.joints)
        order, seen = [], np.zeros(J, dtype=bool)
        pending = list(range(J))
        while pending:
            progressed = False
            rest = []
            for j in pending:
                p = int(self.parent[j])
                if p == -1 or seen[p]:
                    order.append(j)
                    seen[j] = True
                    progressed = True
                else:
                    rest.append(j)
            if not progressed:
                raise ValueError("kinematic tree has a cycle")
            pending = rest
        return np.asarray(order, dtype=np.int64)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices_canonical)

    def face_areas(self) -> Array:
        v = self.vertices_canonical
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True, eq=False)
class Pose:
    """Per-frame joint rotations plus a global root rigid applied last."""

    joint_rotations: Array          # (J, 3) axis-angle, radians
    root_rotation: Array            # (3,)
    root_translation: Array         # (3,)

    def __post_init__(self):
        object.__setattr__(self, "joint_rotations", _f64(self.joint_rotations))
        object.__setattr__(self, "root_rotation", _f64(self.root_rotation))
        object.__setattr__(self, "root_translation", _f64(self.root_translation))

    @staticmethod
    def rest(n_joints: int) -> "Pose":
        return Pose(np.zeros((n_joints, 3)), np.zeros(3), np.zeros(3))

    @property
    def n_joints(self) -> int:
        return len(self.joint_rotations)


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera: p_cam = R p_world + t, pixel = f * (x/z, y/z) + c."""

    focal: Array                    # (2,) pixels
    principal_point: Array          # (2,) pixels
    extrinsic_rotation: Array       # (3, 3) world-to-camera
    extrinsic_translation: Array    # (3,)
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "focal", _f64(self.focal))
        object.__setattr__(self, "principal_point", _f64(self.principal_point))
        object.__setattr__(self, "extrinsic_rotation", _f64(self.extrinsic_rotation))
        object.__setattr__(self, "extrinsic_translation", _f64(self.extrinsic_translation))
        if np.any(self.focal <= 0):
            raise ValueError("focal components must be positive")
        R = self.extrinsic_rotation
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise ValueError("extrinsic rotation must be orthonormal")

    @staticmethod
    def look_at(eye, target, up=(0.0, 1.0, 0.0), focal=100.0, width=64, height=64) -> "Camera":
        eye, target, up = _f64(eye), _f64(target), _f64(up)
        fwd = target - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return Camera(
            focal=np.array([focal, focal]),
            principal_point=np.array([width / 2.0, height / 2.0]),
            extrinsic_rotation=R,
            extrinsic_translation=-R @ eye,
            width=width,
            height=height,
        )

    def to_camera(self, pts: Array) -> Array:
        return pts @ self.extrinsic_rotation.T + self.extrinsic_translation


@dataclass(frozen=True, eq=False)
class AffineTransform3:
    """A 3D affine map x -> linear @ x + translation.

    Blends of rigid joint motions are affine, not rigid, so no orthogonality
    is assumed.
    """

    linear: Array                   # (3, 3)
    translation: Array              # (3,)

    def __post_init__(self):
        object.__setattr__(self, "linear", _f64(self.linear))
        object.__setattr__(self, "translation", _f64(self.translation))
        if not (np.all(np.isfinite(self.linear)) and np.all(np.isfinite(self.translation))):
            raise ValueError("non-finite affine transform")

    @staticmethod
    def identity() -> "AffineTransform3":
        return AffineTransform3(np.eye(3), np.zeros(3))

    def apply(self, pts: Array) -> Array:
        return _f64(pts) @ self.linear.T + self.translation

    def compose(self, other: "AffineTransform3") -> "AffineTransform3":
        """self after other: x -> self(other(x))."""
        return AffineTransform3(self.linear @ other.linear,
                                self.linear @ other.translation + self.translation)


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------

def _fk_forward(template: RiggedTemplate, theta: Array, root_rot: Array,
                root_trans: Array):
    """Per-joint world transforms relative to the rest pose.

    World_j = World_parent(j) @ Local_j with Local_j rotating about the
    joint's rest offset; G_j = Root @ World_j @ translate(-p_j) removes the
    rest placement so G_j is the identity at the rest pose.  Returns the
    (J, 4, 4) transforms plus a cache for the backward pass.
    """
    J = template.n_joints
    theta = _f64(theta)
    if theta.shape != (J, 3):
        raise ValueError(f"pose has {theta.shape[0]} joints, template has {J}")
    joints, parent = template.joints, template.parent

    R_local = rodrigues(theta)
    locals4 = np.tile(np.eye(4), (J, 1, 1))
    locals4[:, :3, :3] = R_local
    offsets = joints.copy()
    has_parent = parent >= 0
    offsets[has_parent] -= joints[parent[has_parent]]
    locals4[:, :3, 3] = offsets

    world4 = np.zeros((J, 4, 4))
    for j in template.topo_order:
        p = int(parent[j])
        world4[j] = locals4[j] if p < 0 else world4[p] @ locals4[j]

    root4 = np.eye(4)
    root4[:3, :3] = rodrigues(root_rot)
    root4[:3, 3] = _f64(root_trans)

    unrest = np.tile(np.eye(4), (J, 1, 1))
    unrest[:, :3, 3] = -joints

    finals = np.einsum("ab,jbc,jcd->jad", root4, world4, unrest)
    cache = (template, theta, _f64(root_rot), locals4, world4, root4, unrest)
    return finals, cache


def _fk_backward(cache, d_finals: Array):
    """Gradients of _fk_forward w.r.t. (theta, root_rot, root_trans)."""
    template, theta, root_rot, locals4, world4, root4, unrest = cache
    parent = template.parent

    wu = np.einsum("jab,jbc->jac", world4, unrest)
    d_root4 = np.einsum("jab,jcb->ac", d_finals, wu)
    d_world = np.einsum("ba,jbc,jdc->jad", root4, d_finals, unrest)

    d_locals = np.zeros_like(locals4)
    for j in template.topo_order[::-1]:
        p = int(parent[j])
        if p < 0:
            d_locals[j] += d_world[j]
        else:
            d_locals[j] += world4[p].T @ d_world[j]
            d_world[p] += d_world[j] @ locals4[j].T

    d_theta = rodrigues_backward(theta, d_locals[:, :3, :3])
    d_root_rot = rodrigues_backward(root_rot, d_root4[:3, :3])
    d_root_trans = d_root4[:3, 3].copy()
    return d_theta, d_root_rot, d_root_trans


def joint_transforms(template: RiggedTemplate, pose: Pose) -> list[AffineTransform3]:
    """Per-joint transforms G_j under ``pose``, rest-relative, root applied last.

    A template vertex rigidly bound to joint j maps by G_j.
    """
    if pose.n_joints != template.n_joints:
        raise ValueError(
            f"pose has {pose.n_joints} joints, template has {template.n_joints}")
    finals, _ = _fk_forward(template, pose.joint_rotations,
                            pose.root_rotation, pose.root_translation)
    return [AffineTransform3(m[:3, :3], m[:3, 3]) for m in finals]
