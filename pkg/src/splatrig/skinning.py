"""Extends the template's blend skinning to arbitrary canonical points.

Every off-mesh point is articulated by its k nearest template vertices acting
as virtual joints: the vertices' rigid motions are blended with weights

    tau_hat_i(x) = exp(-( ||v_i - x|| * ||w_i - w_hat|| ) / (2 sigma^2))

normalized to sum to one, where w_i is vertex i's blend-weight row and w_hat
is the row of x's single nearest vertex.  Canonical vertex positions are used
throughout, so the weights never see the pose and can be precomputed once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .geometry import (AffineTransform3, GaussianSet, Pose, RiggedTemplate,
                       _fk_backward, _fk_forward)

Array = np.ndarray

BRUTE_FORCE_MAX_VERTICES = 512  # below this a grid buys nothing


@dataclass(frozen=True, eq=False)
class SkinField:
    """Pose-independent articulation weights for every Gaussian.

    ``joint_weights`` folds tau through the per-vertex blend weights:
    row g gives the effective weight of each joint on Gaussian g, which is
    what the hot path actually consumes.
    """

    neighbor_indices: Array   # (N, k) int
    tau: Array                # (N, k), rows sum to 1
    k: int
    sigma: float
    generation: int
    joint_weights: Array      # (N, J)

    def __post_init__(self):
        sums = self.tau.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValueError("tau rows must sum to 1")


class PointGrid:
    """Uniform spatial hash over points for exact k-nearest-neighbor queries."""

    def __init__(self, points: Array, cell_size: float):
        self.points = np.asarray(points, dtype=np.float64)
        self.cell = float(cell_size)
        self.cells: dict[tuple, Array] = {}
        keys = np.floor(self.points / self.cell).astype(np.int64)
        order = np.lexsort((np.arange(len(points)), keys[:, 2], keys[:, 1], keys[:, 0]))
        start = 0
        while start < len(order):
            key = tuple(keys[order[start]])
            stop = start
            while stop < len(order) and tuple(keys[order[stop]]) == key:
                stop += 1
            self.cells[key] = order[start:stop]
            start = stop

    def query_knn(self, x: Array, k: int) -> Array:
        """Indices of the k nearest points, ties broken by lower index."""
        x = np.asarray(x, dtype=np.float64)
        base = np.floor(x / self.cell).astype(np.int64)
        found: list[Array] = []
        n_found = 0
        ring = 0
        while True:
            for key in self._ring_keys(base, ring):
                idx = self.cells.get(key)
                if idx is not None:
                    found.append(idx)
                    n_found += len(idx)
            if n_found >= k:
                cand = np.concatenate(found)
                d = np.linalg.norm(self.points[cand] - x, axis=1)
                order = np.lexsort((cand, d))
                kth = d[order[k - 1]]
                # cells beyond this ring hold points at least ring*cell away
                if kth < ring * self.cell or n_found >= len(self.points):
                    return cand[order[:k]]
            elif n_found >= len(self.points):
                raise ValueError("k exceeds point count")
            ring += 1

    @staticmethod
    def _ring_keys(base, ring: int):
        if ring == 0:
            yield tuple(base)
            return
        r = ring
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                for dz in range(-r, r + 1):
                    if max(abs(dx), abs(dy), abs(dz)) == r:
                        yield (base[0] + dx, base[1] + dy, base[2] + dz)


def knn_vertices(point: Array, template: RiggedTemplate, k: int,
                 grid: Optional[PointGrid] = None) -> Array:
    """Indices of the k template vertices closest to ``point``.

    Ties break toward the lower vertex index.  A prebuilt grid may be passed
    to amortize repeated queries; otherwise the search is exhaustive.
    """
    if template.n_vertices == 0:
        raise ValueError("empty template")
    if k < 1 or k > template.n_vertices:
        raise ValueError(f"k={k} out of range for {template.n_vertices} vertices")
    if grid is not None:
        return grid.query_knn(point, k)
    d = np.linalg.norm(template.vertices_canonical - np.asarray(point, dtype=np.float64), axis=1)
    order = np.lexsort((np.arange(len(d)), d))
    return order[:k]


def tau_weights(point: Array, neighbors: Array, template: RiggedTemplate,
                sigma: float) -> Array:
    """Normalized virtual-joint weights of ``point`` over its KNN vertices.

    The reference row w_hat belongs to the single nearest neighbor (the first
    entry of ``neighbors``).  If every unnormalized weight underflows to zero
    the row falls back to uniform 1/k.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    point = np.asarray(point, dtype=np.float64)
    v = template.vertices_canonical[neighbors]
    w = template.blend_weights[neighbors]
    w_hat = w[0]
    d = np.linalg.norm(v - point, axis=1)
    wd = np.linalg.norm(w - w_hat, axis=1)
    tau_hat = np.exp(-(d * wd) / (2.0 * sigma * sigma))
    total = tau_hat.sum()
    if total == 0.0:
        return np.full(len(neighbors), 1.0 / len(neighbors))
    return tau_hat / total


def build_skin_field(gaussians: GaussianSet, template: RiggedTemplate,
                     k: int = 4, sigma: float = 0.05) -> SkinField:
    """KNN + tau weights for every Gaussian mean, tagged with the generation."""
    return build_skin_field_for_points(gaussians.means, template, k, sigma,
                                       generation=gaussians.generation)


def build_skin_field_for_points(points: Array, template: RiggedTemplate,
                                k: int, sigma: float, generation: int = 0) -> SkinField:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    grid = None
    if template.n_vertices >= BRUTE_FORCE_MAX_VERTICES:
        grid = PointGrid(template.vertices_canonical, cell_size=2.0 * sigma)

    neighbors = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        neighbors[i] = knn_vertices(points[i], template, k, grid=grid)

    # vectorized tau over all rows
    v = template.vertices_canonical[neighbors]          # (N, k, 3)
    w = template.blend_weights[neighbors]               # (N, k, J)
    d = np.linalg.norm(v - points[:, None, :], axis=2)  # (N, k)
    wd = np.linalg.norm(w - w[:, :1, :], axis=2)        # (N, k)
    tau_hat = np.exp(-(d * wd) / (2.0 * sigma * sigma))
    totals = tau_hat.sum(axis=1)
    dead = totals == 0.0
    tau = np.where(dead[:, None], 1.0 / k, tau_hat / np.where(dead, 1.0, totals)[:, None])

    joint_weights = np.einsum("nk,nkj->nj", tau, w)
    return SkinField(neighbor_indices=neighbors, tau=tau, k=k, sigma=sigma,
                     generation=generation, joint_weights=joint_weights)


# ---------------------------------------------------------------------------
# forward skinning
# ---------------------------------------------------------------------------

def _blend_and_skin(points: Array, joint_weights: Array, finals: Array):
    """Blend joint transforms per point and apply them.

    Returns (skinned points (N, 3), blended linear parts (N, 3, 3),
    blended translations (N, 3)).
    """
    M = np.einsum("nj,jab->nab", joint_weights, finals[:, :3, :3])
    t = np.einsum("nj,ja->na", joint_weights, finals[:, :3, 3])
    skinned = np.einsum("nab,nb->na", M, points) + t
    return skinned, M, t


def forward_skin_point(point: Array, field_row: Tuple[Array, Array],
                       template: RiggedTemplate, pose: Pose) -> Tuple[Array, AffineTransform3]:
    """Transport one canonical point to observation space.

    ``field_row`` is (neighbor indices, tau weights) from the skin field.
    Returns the observed point and the blended affine so covariance transport
    can reuse it.
    """
    neighbors, tau = field_row
    if abs(float(np.sum(tau)) - 1.0) > 1e-9:
        raise ValueError("field row weights must sum to 1")
    if pose.n_joints != template.n_joints:
        raise ValueError(
            f"pose has {pose.n_joints} joints, template has {template.n_joints}")
    finals, _ = _fk_forward(template, pose.joint_rotations,
                            pose.root_rotation, pose.root_translation)
    jw = np.asarray(tau) @ template.blend_weights[np.asarray(neighbors)]
    skinned, M, t = _blend_and_skin(np.asarray(point, dtype=np.float64)[None], jw[None], finals)
    return skinned[0], AffineTransform3(M[0], t[0])


def transport_covariance(sigma_c: Array, m_linear: Array) -> Array:
    """M Sigma M^T, averaged with its transpose to kill round-off asymmetry."""
    s = np.asarray(m_linear) @ np.asarray(sigma_c) @ np.asarray(m_linear).swapaxes(-1, -2)
    return 0.5 * (s + s.swapaxes(-1, -2))


# ---------------------------------------------------------------------------
# tape op
# ---------------------------------------------------------------------------

def skin_op(means: ad.Tensor, theta: ad.Tensor, root_rot: ad.Tensor,
            root_trans: ad.Tensor, joint_weights: Array,
            template: RiggedTemplate) -> Tuple[ad.Tensor, ad.Tensor]:
    """Differentiable batched skinning: canonical means -> (observed, M).

    Gradients flow to the means and to the pose parameters; the precomputed
    ``joint_weights`` are treated as constants (the field is frozen between
    rebuilds).
    """
    def forward(x, th, rr, rt):
        finals, fk_cache = _fk_forward(template, th, rr, rt)
        skinned, M, _t = _blend_and_skin(x, joint_weights, finals)
        return [skinned, M], (x, M, fk_cache)

    def backward_fn(cache, grads):
        x, M, fk_cache = cache
        d_skinned, d_M = grads
        d_x = np.einsum("nab,na->nb", M, d_skinned)
        d_M_total = d_M + d_skinned[:, :, None] * x[:, None, :]
        J = template.n_joints
        d_finals = np.zeros((J, 4, 4))
        d_finals[:, :3, :3] = np.einsum("nj,nab->jab", joint_weights, d_M_total)
        d_finals[:, :3, 3] = np.einsum("nj,na->ja", joint_weights, d_skinned)
        d_theta, d_root_rot, d_root_trans = _fk_backward(fk_cache, d_finals)
        return [d_x, d_theta, d_root_rot, d_root_trans]

    skinned, M = ad.custom_op([means, theta, root_rot, root_trans],
                              forward, backward_fn, name="skin")
    return skinned, M
