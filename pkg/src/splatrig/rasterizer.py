"""Differentiable tile-based splatting of 3D Gaussians to RGB / alpha images.

Forward model, per pixel with splats sorted front to back by depth:

    alpha_i = min(alpha0_i * exp(-0.5 d^T conic d), 0.99)
    C       = sum_i c_i alpha_i prod_{j<i} (1 - alpha_j)

on a black background, with the output alpha channel preserved.  Pixel (row,
col) has center (col + 0.5, row + 0.5).  A brute-force per-pixel renderer with
no tiling implements the same model independently and serves as the
equivalence oracle for the tile path.

Two numeric floors keep the two paths within 1e-10 of each other:
  - tiles collect every splat within TILE_BIN_SIGMA standard deviations, far
    enough out that an excluded splat can contribute at most exp(-32) per
    pixel;
  - compositing stops only once transmittance drops below TERMINATION_EPS,
    which bounds the truncated tail by the same margin.  (A looser 1e-4 stop
    would be faster but visibly diverges from the oracle.)

The backward pass recomputes per-tile front-to-back state instead of storing
it, walks each tile back to front with suffix accumulators, and chains
through the projection Jacobian (including its dependence on the mean) to 3D
means and covariances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .geometry import Camera

Array = np.ndarray

TILE_SIZE = 16
LOW_PASS_FLOOR = 0.3          # px^2 added to the 2D covariance diagonal
ALPHA_MAX = 0.99
TERMINATION_EPS = 1e-14       # transmittance stop; keeps tile == oracle < 1e-10
TILE_BIN_SIGMA = 8.0          # exp(-32) ~ 1.3e-14 worst-case excluded mass
IMAGE_CULL_SIGMA = 3.0        # projection-time cull against the image rect
NEAR_PLANE = 0.01
_BRUTE_CHUNK = 256


@dataclass(frozen=True, eq=False)
class SplattedGaussian:
    """A projected Gaussian ready for compositing."""

    mean2d: Array        # (2,) pixels
    cov2d: Array         # (2, 2), low-pass floor already applied
    depth: float         # camera-space z
    color: Array         # (3,)
    alpha0: float        # opacity in (0, 1)
    source_index: int


@dataclass(eq=False)
class RenderOutput:
    rgb: Array            # (H, W, 3) in [0, 1]
    alpha: Array          # (H, W) in [0, 1]
    contributions: Array  # per input splat: total compositing weight


@dataclass(eq=False)
class SplatGradients:
    d_mean2d: Array       # (M, 2)
    d_cov2d: Array        # (M, 2, 2)
    d_alpha0: Array       # (M,)
    d_color: Array        # (M, 3)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def _project_arrays(points_cam: Array, covs_cam: Array, fx, fy, cx, cy, width, height):
    """Pinhole projection with first-order covariance propagation.

    Returns per-kept-splat (mean2d, cov2d, depth), the keep mask over the
    inputs, and a cache for the backward pass.  Culls splats behind the near
    plane or whose IMAGE_CULL_SIGMA ellipse misses the image.
    """
    p = np.asarray(points_cam, dtype=np.float64)
    S = np.asarray(covs_cam, dtype=np.float64)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]

    front = z > NEAR_PLANE
    zs = np.where(front, z, 1.0)  # placeholder depth for culled rows

    mean2d = np.stack([fx * x / zs + cx, fy * y / zs + cy], axis=1)
    J = np.zeros((len(p), 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * x / (zs * zs)
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * y / (zs * zs)
    cov2d = np.einsum("nab,nbc,ndc->nad", J, S, J)
    cov2d[:, 0, 0] += LOW_PASS_FLOOR
    cov2d[:, 1, 1] += LOW_PASS_FLOOR

    radius = IMAGE_CULL_SIGMA * np.sqrt(_max_eigenvalue(cov2d))
    on_image = (mean2d[:, 0] + radius > 0) & (mean2d[:, 0] - radius < width) & \
               (mean2d[:, 1] + radius > 0) & (mean2d[:, 1] - radius < height)
    keep = front & on_image

    cache = (p[keep], S[keep], J[keep], fx, fy)
    return mean2d[keep], cov2d[keep], z[keep], keep, cache


def _project_backward(cache, d_mean2d: Array, d_cov2d: Array):
    """Gradients of _project_arrays w.r.t. kept camera-frame means and covs."""
    p, S, J, fx, fy = cache
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    G = np.asarray(d_cov2d)

    d_S = np.einsum("nba,nbc,ncd->nad", J, G, J)
    d_J = np.einsum("nab,nbc,ndc->nad", G, J, np.swapaxes(S, 1, 2)) + \
        np.einsum("nba,nbc,ncd->nad", G, J, S)

    d_p = np.einsum("nba,nb->na", J, np.asarray(d_mean2d))
    inv_z2 = 1.0 / (z * z)
    d_p[:, 0] += d_J[:, 0, 2] * (-fx * inv_z2)
    d_p[:, 1] += d_J[:, 1, 2] * (-fy * inv_z2)
    d_p[:, 2] += (d_J[:, 0, 0] * (-fx * inv_z2)
                  + d_J[:, 1, 1] * (-fy * inv_z2)
                  + d_J[:, 0, 2] * (2.0 * fx * x * inv_z2 / z)
                  + d_J[:, 1, 2] * (2.0 * fy * y * inv_z2 / z))
    return d_p, d_S


def _max_eigenvalue(cov2d: Array) -> Array:
    a, b, c, d = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 0], cov2d[:, 1, 1]
    mid = 0.5 * (a + d)
    det = a * d - b * c
    return mid + np.sqrt(np.maximum(mid * mid - det, 0.0))


def project_gaussian(mean3d: Array, cov3d: Array, camera: Camera,
                     color: Array = (0.0, 0.0, 0.0), alpha0: float = 1.0,
                     source_index: int = 0) -> Optional[SplattedGaussian]:
    """Project one world-space Gaussian; returns None when culled."""
    R, t = camera.extrinsic_rotation, camera.extrinsic_translation
    p = (R @ np.asarray(mean3d, dtype=np.float64) + t)[None]
    C = (R @ np.asarray(cov3d, dtype=np.float64) @ R.T)[None]
    mean2d, cov2d, depth, keep, _ = _project_arrays(
        p, C, camera.focal[0], camera.focal[1],
        camera.principal_point[0], camera.principal_point[1],
        camera.width, camera.height)
    if not keep[0]:
        return None
    return SplattedGaussian(mean2d=mean2d[0], cov2d=cov2d[0], depth=float(depth[0]),
                            color=np.asarray(color, dtype=np.float64),
                            alpha0=float(alpha0), source_index=source_index)


def project_gaussians(means3d: Array, covs3d: Array, colors: Array,
                      alpha0: Array, camera: Camera) -> list[SplattedGaussian]:
    """Batch world-space projection; culled splats are dropped."""
    R, t = camera.extrinsic_rotation, camera.extrinsic_translation
    p = np.asarray(means3d, dtype=np.float64) @ R.T + t
    C = np.einsum("ab,nbc,dc->nad", R, np.asarray(covs3d, dtype=np.float64), R)
    mean2d, cov2d, depth, keep, _ = _project_arrays(
        p, C, camera.focal[0], camera.focal[1],
        camera.principal_point[0], camera.principal_point[1],
        camera.width, camera.height)
    src = np.nonzero(keep)[0]
    colors = np.asarray(colors, dtype=np.float64)
    alpha0 = np.asarray(alpha0, dtype=np.float64)
    return [SplattedGaussian(mean2d=mean2d[i], cov2d=cov2d[i], depth=float(depth[i]),
                             color=colors[s], alpha0=float(alpha0[s]), source_index=int(s))
            for i, s in enumerate(src)]


# ---------------------------------------------------------------------------
# forward rendering
# ---------------------------------------------------------------------------

def _splat_arrays(splats: Sequence[SplattedGaussian]):
    if len(splats) == 0:
        return (np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0),
                np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64))
    mean2d = np.stack([s.mean2d for s in splats])
    cov2d = np.stack([s.cov2d for s in splats])
    depth = np.asarray([s.depth for s in splats], dtype=np.float64)
    color = np.stack([np.asarray(s.color, dtype=np.float64) for s in splats])
    alpha0 = np.asarray([s.alpha0 for s in splats], dtype=np.float64)
    src = np.asarray([s.source_index for s in splats], dtype=np.int64)
    return mean2d, cov2d, depth, color, alpha0, src


def _conics(cov2d: Array) -> Array:
    a, b = cov2d[:, 0, 0], cov2d[:, 0, 1]
    c, d = cov2d[:, 1, 0], cov2d[:, 1, 1]
    det = a * d - b * c
    if np.any(det <= 0):
        raise RuntimeError("internal invariant violation: singular 2D covariance")
    inv = np.empty_like(cov2d)
    inv[:, 0, 0] = d / det
    inv[:, 0, 1] = -b / det
    inv[:, 1, 0] = -c / det
    inv[:, 1, 1] = a / det
    return inv


def _tile_buckets(mean2d: Array, radius: Array, order: Array, width: int, height: int):
    """Depth-ordered splat lists per tile, binned by bounding box."""
    nx = (width + TILE_SIZE - 1) // TILE_SIZE
    ny = (height + TILE_SIZE - 1) // TILE_SIZE
    buckets: list[list[int]] = [[] for _ in range(nx * ny)]
    for s in order:
        mx, my = mean2d[s]
        r = radius[s]
        tx0 = max(int((mx - r) // TILE_SIZE), 0)
        tx1 = min(int((mx + r) // TILE_SIZE), nx - 1)
        ty0 = max(int((my - r) // TILE_SIZE), 0)
        ty1 = min(int((my + r) // TILE_SIZE), ny - 1)
        if tx1 < tx0 or ty1 < ty0:
            continue
        for ty in range(ty0, ty1 + 1):
            row = ty * nx
            for tx in range(tx0, tx1 + 1):
                buckets[row + tx].append(s)
    return buckets, nx, ny


def _render_core(mean2d, cov2d, depth, color, alpha0, src, width, height,
                 want_grad_cache=False):
    """Shared tile walker: forward image, contributions, and (optionally) the
    per-tile compositing state needed by the backward pass."""
    n = len(mean2d)
    rgb = np.zeros((height, width, 3))
    alpha_img = np.zeros((height, width))
    contrib = np.zeros(n)
    tile_caches = {} if want_grad_cache else None
    if n == 0:
        return rgb, alpha_img, contrib, tile_caches

    order = np.lexsort((src, depth))
    conic = _conics(cov2d)
    radius = TILE_BIN_SIGMA * np.sqrt(_max_eigenvalue(cov2d))
    buckets, nx, ny = _tile_buckets(mean2d, radius, order, width, height)

    for ty in range(ny):
        y0, y1 = ty * TILE_SIZE, min((ty + 1) * TILE_SIZE, height)
        for tx in range(nx):
            bucket = buckets[ty * nx + tx]
            if not bucket:
                continue
            x0, x1 = tx * TILE_SIZE, min((tx + 1) * TILE_SIZE, width)
            py, px = np.mgrid[y0:y1, x0:x1]
            px = px.reshape(-1) + 0.5
            py = py.reshape(-1) + 0.5

            tile_rgb = np.zeros((px.size, 3))
            transmittance = np.ones(px.size)
            steps = [] if want_grad_cache else None
            for s in bucket:
                dx = px - mean2d[s, 0]
                dy = py - mean2d[s, 1]
                q = 0.5 * (conic[s, 0, 0] * dx * dx
                           + (conic[s, 0, 1] + conic[s, 1, 0]) * dx * dy
                           + conic[s, 1, 1] * dy * dy)
                g = np.exp(-q)
                a = np.minimum(alpha0[s] * g, ALPHA_MAX)
                w = a * transmittance
                tile_rgb += w[:, None] * color[s]
                contrib[s] += w.sum()
                if want_grad_cache:
                    steps.append((s, g, a, transmittance))
                transmittance = transmittance * (1.0 - a)
                if transmittance.max() < TERMINATION_EPS:
                    break
            rgb[y0:y1, x0:x1] = tile_rgb.reshape(y1 - y0, x1 - x0, 3)
            alpha_img[y0:y1, x0:x1] = (1.0 - transmittance).reshape(y1 - y0, x1 - x0)
            if want_grad_cache:
                tile_caches[(ty, tx)] = (px, py, steps)
    return rgb, alpha_img, contrib, tile_caches


def _render_arrays(mean2d, cov2d, depth, color, alpha0, src, width, height):
    rgb, alpha_img, contrib, _ = _render_core(
        mean2d, cov2d, depth, color, alpha0, src, width, height)
    return rgb, alpha_img, contrib


def _render_backward_arrays(mean2d, cov2d, depth, color, alpha0, src,
                            width, height, d_rgb, d_alpha):
    """Analytic gradients of _render_arrays; recomputes forward tile state."""
    n = len(mean2d)
    grads = SplatGradients(d_mean2d=np.zeros((n, 2)), d_cov2d=np.zeros((n, 2, 2)),
                           d_alpha0=np.zeros(n), d_color=np.zeros((n, 3)))
    if n == 0:
        return grads
    _, _, _, tile_caches = _render_core(
        mean2d, cov2d, depth, color, alpha0, src, width, height,
        want_grad_cache=True)
    conic = _conics(cov2d)
    d_conic = np.zeros((n, 2, 2))

    for (ty, tx), (px, py, steps) in tile_caches.items():
        y0, y1 = ty * TILE_SIZE, min((ty + 1) * TILE_SIZE, height)
        x0, x1 = tx * TILE_SIZE, min((tx + 1) * TILE_SIZE, width)
        dC = d_rgb[y0:y1, x0:x1].reshape(-1, 3)
        dA = d_alpha[y0:y1, x0:x1].reshape(-1)

        suffix_c = np.zeros((px.size, 3))
        suffix_w = np.zeros(px.size)
        for s, g, a, t_pre in reversed(steps):
            one_m = 1.0 - a
            w = a * t_pre
            grads.d_color[s] += w @ dC
            d_a = (dC * (t_pre[:, None] * color[s] - suffix_c / one_m[:, None])).sum(axis=1) \
                + dA * (t_pre - suffix_w / one_m)
            d_a = np.where(a < ALPHA_MAX, d_a, 0.0)  # clamp kills the gradient
            grads.d_alpha0[s] += float(d_a @ g)
            dg = d_a * alpha0[s]
            gg = dg * g
            dx = px - mean2d[s, 0]
            dy = py - mean2d[s, 1]
            qx = conic[s, 0, 0] * dx + 0.5 * (conic[s, 0, 1] + conic[s, 1, 0]) * dy
            qy = conic[s, 1, 1] * dy + 0.5 * (conic[s, 0, 1] + conic[s, 1, 0]) * dx
            grads.d_mean2d[s, 0] += float(gg @ qx)
            grads.d_mean2d[s, 1] += float(gg @ qy)
            d_conic[s, 0, 0] += -0.5 * float(gg @ (dx * dx))
            d_conic[s, 0, 1] += -0.5 * float(gg @ (dx * dy))
            d_conic[s, 1, 0] += -0.5 * float(gg @ (dx * dy))
            d_conic[s, 1, 1] += -0.5 * float(gg @ (dy * dy))
            suffix_c += w[:, None] * color[s]
            suffix_w += w

    # conic = inv(cov2d): dL/dcov = -inv^T dL/dconic inv^T
    grads.d_cov2d = -np.einsum("nba,nbc,ndc->nad", conic, d_conic, conic)
    return grads


def _brute_force_arrays(mean2d, cov2d, depth, color, alpha0, src, width, height):
    """Per-pixel compositing of every splat; no tiling, no early exit."""
    rgb = np.zeros((height, width, 3))
    alpha_img = np.zeros((height, width))
    contrib = np.zeros(len(mean2d))
    if len(mean2d) == 0:
        return rgb, alpha_img, contrib

    order = np.lexsort((src, depth))
    conic = _conics(cov2d)
    py, px = np.mgrid[0:height, 0:width]
    px = px.reshape(-1) + 0.5
    py = py.reshape(-1) + 0.5

    flat_rgb = np.zeros((px.size, 3))
    transmittance = np.ones(px.size)
    for start in range(0, len(order), _BRUTE_CHUNK):
        chunk = order[start:start + _BRUTE_CHUNK]
        dx = px[None, :] - mean2d[chunk, 0, None]
        dy = py[None, :] - mean2d[chunk, 1, None]
        q = 0.5 * (conic[chunk, 0, 0, None] * dx * dx
                   + (conic[chunk, 0, 1, None] + conic[chunk, 1, 0, None]) * dx * dy
                   + conic[chunk, 1, 1, None] * dy * dy)
        a = np.minimum(alpha0[chunk, None] * np.exp(-q), ALPHA_MAX)
        keep_prod = np.cumprod(1.0 - a, axis=0)
        t_pre = np.concatenate([transmittance[None, :], keep_prod[:-1] * transmittance], axis=0)
        w = a * t_pre
        flat_rgb += np.einsum("mp,mc->pc", w, color[chunk])
        contrib[chunk] += w.sum(axis=1)
        transmittance = transmittance * keep_prod[-1]
    return (flat_rgb.reshape(height, width, 3),
            (1.0 - transmittance).reshape(height, width), contrib)


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def render(splats: Sequence[SplattedGaussian], camera: Camera) -> RenderOutput:
    """Tile-based front-to-back compositing of projected splats."""
    arrays = _splat_arrays(splats)
    rgb, alpha_img, contrib = _render_arrays(*arrays, camera.width, camera.height)
    return RenderOutput(rgb=rgb, alpha=alpha_img, contributions=contrib)


def render_brute_force(splats: Sequence[SplattedGaussian], camera: Camera) -> RenderOutput:
    """Oracle renderer: identical contract to render, independent path."""
    arrays = _splat_arrays(splats)
    rgb, alpha_img, contrib = _brute_force_arrays(*arrays, camera.width, camera.height)
    return RenderOutput(rgb=rgb, alpha=alpha_img, contributions=contrib)


def render_backward(splats: Sequence[SplattedGaussian], camera: Camera,
                    d_rgb: Array, d_alpha: Array) -> SplatGradients:
    """Gradients of the tile renderer for the given output gradients."""
    arrays = _splat_arrays(splats)
    return _render_backward_arrays(*arrays, camera.width, camera.height,
                                   np.asarray(d_rgb, dtype=np.float64),
                                   np.asarray(d_alpha, dtype=np.float64))


def render_mask(means3d_obs: Array, covs3d_obs: Array, alpha0: Array,
                camera: Camera) -> Array:
    """Soft silhouette: the normal pipeline with every color forced to white.

    Returns the red channel; differentiable w.r.t. geometry and opacity but
    not color by construction.
    """
    n = len(means3d_obs)
    splats = project_gaussians(means3d_obs, covs3d_obs,
                               np.ones((n, 3)), alpha0, camera)
    return render(splats, camera).rgb[:, :, 0]


# ---------------------------------------------------------------------------
# tape op
# ---------------------------------------------------------------------------

def splat_scene_op(points_cam: ad.Tensor, covs_cam: ad.Tensor, alpha0: ad.Tensor,
                   colors: ad.Tensor, camera: Camera):
    """Differentiable camera-frame Gaussians -> (rgb, alpha) images.

    Extrinsics (and their corrections) are applied upstream on the tape; this
    op owns projection, culling, and compositing.  Culled splats get zero
    gradients.
    """
    fx, fy = camera.focal
    cx, cy = camera.principal_point
    width, height = camera.width, camera.height

    def forward(p, S, a0, col):
        mean2d, cov2d, depth, keep, pcache = _project_arrays(
            p, S, fx, fy, cx, cy, width, height)
        src = np.nonzero(keep)[0]
        rgb, alpha_img, _ = _render_arrays(mean2d, cov2d, depth, col[keep],
                                           a0[keep], src, width, height)
        cache = (p.shape[0], keep, pcache, mean2d, cov2d, depth,
                 col[keep], a0[keep], src)
        return [rgb, alpha_img], cache

    def backward(cache, grads):
        n, keep, pcache, mean2d, cov2d, depth, col_k, a0_k, src = cache
        d_rgb, d_alpha = grads
        sg = _render_backward_arrays(mean2d, cov2d, depth, col_k, a0_k, src,
                                     width, height, d_rgb, d_alpha)
        d_p_k, d_S_k = _project_backward(pcache, sg.d_mean2d, sg.d_cov2d)
        d_p = np.zeros((n, 3))
        d_S = np.zeros((n, 3, 3))
        d_a0 = np.zeros(n)
        d_col = np.zeros((n, 3))
        d_p[keep] = d_p_k
        d_S[keep] = d_S_k
        d_a0[keep] = sg.d_alpha0
        d_col[keep] = sg.d_color
        return [d_p, d_S, d_a0, d_col]

    rgb, alpha_img = ad.custom_op([points_cam, covs_cam, alpha0, colors],
                                  forward, backward, name="splat_scene")
    return rgb, alpha_img
