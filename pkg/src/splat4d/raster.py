"""Differentiable tile-based rasterizer for sliced Gaussians.

The forward path projects each 3D slice to an image-plane Gaussian (EWA
approximation: 2D covariance J W cov3 W^T J^T plus an isotropic blur floor),
bins fragments into 16x16 tiles, sorts front to back, and alpha-composites
color and depth per pixel:

    C = sum_i c_i a_i T_i + T_final * background,   T_i = prod_{j<i} (1 - a_j)
    D = sum_i d_i a_i T_i

with a_i = min(alpha_clamp, opacity_base_i * exp(-0.5 d^T cov2^-1 d)).
Compositing stops once transmittance drops below ``term_transmittance``.

The backward path is fully analytic: per-tile suffix sums invert the
compositing chain, then the EWA projection, producing exact gradients for
every field parameter.  All per-tile work is sequential numpy and partial
results merge in tile order, so outputs and gradients are bit-identical
regardless of the worker thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .cameras import CameraView
from .field import (
    GaussianField,
    ParamGrads,
    SliceBatch,
    eval_color,
    eval_color_backward,
    slice_at_time,
    slice_backward,
)

__all__ = [
    "RenderConfig",
    "FragmentBatch",
    "RenderOutput",
    "TileOverflowError",
    "project_gaussians",
    "sort_fragments",
    "render",
    "render_backward",
    "render_field",
    "render_field_backward",
]


class TileOverflowError(RuntimeError):
    """Raised in strict mode when a tile exceeds the fragment cap."""


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 8  # small tiles waste less work on fragments that barely overlap
    eps_blur: float = 0.3  # px^2 isotropic floor added to the 2D covariance
    near_plane: float = 0.01
    alpha_cull: float = 1.0 / 255.0  # drop fragments with opacity base below
    alpha_clamp: float = 0.99
    term_transmittance: float = 1e-4
    radius_alpha_floor: float = 1e-7  # bounding box keeps alpha >= this
    tile_cap: int = 2048
    strict_tile_cap: bool = False
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    threads: int = 1


@dataclass
class FragmentBatch:
    """Projected 2D Gaussians ready for compositing (struct of arrays)."""

    mean2: np.ndarray  # (F, 2) pixel-space centers
    cov2: np.ndarray  # (F, 2, 2)
    opacity_base: np.ndarray  # (F,) sigma * decay
    depth: np.ndarray  # (F,) camera-frame z
    color: np.ndarray  # (F, 3) post-clamp RGB
    source: np.ndarray  # (F,) indices into the originating slice batch

    @property
    def count(self) -> int:
        return self.mean2.shape[0]


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W); 0 where alpha is 0
    alpha: np.ndarray  # (H, W) accumulated opacity in [0, 1]
    n_contrib: np.ndarray  # (H, W) fragments composited per pixel
    # depth of the fragment where accumulated opacity first crosses 0.5; a
    # view-consistent surface estimate (0 where opacity never gets there).
    # Forward-only: gradients flow through the blended depth channel.
    median_depth: np.ndarray | None = None


@dataclass
class RenderContext:
    """Everything the backward pass needs to replay compositing."""

    fragments: FragmentBatch
    camera: CameraView
    config: RenderConfig
    tile_frags: list[np.ndarray] = dc_field(default_factory=list)
    tile_bounds: list[tuple[int, int, int, int]] = dc_field(default_factory=list)


@dataclass
class FragmentGrads:
    mean2: np.ndarray
    cov2: np.ndarray
    opacity_base: np.ndarray
    depth: np.ndarray
    color: np.ndarray


@dataclass
class ProjectionContext:
    slices: SliceBatch
    camera: CameraView
    config: RenderConfig
    kept: np.ndarray  # indices into the slice batch
    color_preclamp: np.ndarray  # (N, 3) before the >= 0 clamp
    directions: np.ndarray | None  # (N, 3) unit view directions (SH degree 1)


def _perspective_jacobians(mean_cam: np.ndarray, camera: CameraView) -> np.ndarray:
    """Jacobians (K, 2, 3) of pixel coords w.r.t. camera-frame position."""
    x, y, z = mean_cam[:, 0], mean_cam[:, 1], mean_cam[:, 2]
    k = mean_cam.shape[0]
    j = np.zeros((k, 2, 3), dtype=mean_cam.dtype)
    j[:, 0, 0] = camera.fx / z
    j[:, 0, 2] = -camera.fx * x / (z * z)
    j[:, 1, 1] = camera.fy / z
    j[:, 1, 2] = -camera.fy * y / (z * z)
    return j


def project_gaussians(
    slices: SliceBatch,
    colors: np.ndarray,
    camera: CameraView,
    config: RenderConfig = RenderConfig(),
) -> tuple[FragmentBatch, np.ndarray]:
    """EWA-project a slice batch into fragments; returns (batch, kept indices).

    Culls primitives behind the near plane and those whose opacity base
    ``sigma * decay`` falls below ``alpha_cull``.  ``colors`` are post-clamp
    per-primitive RGB values aligned with the slice batch.
    """
    dtype = slices.mean3.dtype
    rot = camera.rotation.astype(dtype)
    tr = camera.translation.astype(dtype)
    mean_cam = slices.mean3 @ rot.T + tr
    ob = slices.sigma * slices.decay
    kept = np.flatnonzero((mean_cam[:, 2] > config.near_plane) & (ob >= config.alpha_cull))

    mc = mean_cam[kept]
    z = mc[:, 2]
    mean2 = np.stack(
        [camera.fx * mc[:, 0] / z + camera.cx, camera.fy * mc[:, 1] / z + camera.cy],
        axis=1,
    )
    j = _perspective_jacobians(mc, camera)
    t = np.einsum("kab,bc->kac", j, rot)  # J W, (K, 2, 3)
    cov2 = np.einsum("kab,kbc,kdc->kad", t, slices.cov3[kept], t)
    cov2[:, 0, 0] += config.eps_blur
    cov2[:, 1, 1] += config.eps_blur

    return (
        FragmentBatch(
            mean2=mean2,
            cov2=cov2,
            opacity_base=ob[kept],
            depth=z,
            color=np.asarray(colors, dtype=dtype)[kept],
            source=kept,
        ),
        kept,
    )


def _bounding_radii(frags: FragmentBatch, config: RenderConfig) -> np.ndarray:
    """Per-fragment pixel radius beyond which alpha stays below the floor."""
    a = frags.cov2[:, 0, 0]
    b = frags.cov2[:, 0, 1]
    c = frags.cov2[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    # alpha(r) = ob * exp(-r^2 / (2 lam_max)) >= floor  =>  r bound below
    ratio = np.maximum(frags.opacity_base / config.radius_alpha_floor, 1.0 + 1e-7)
    return np.sqrt(2.0 * np.log(ratio) * lam_max)


def sort_fragments(
    frags: FragmentBatch, camera: CameraView, config: RenderConfig
) -> tuple[list[np.ndarray], list[tuple[int, int, int, int]]]:
    """Bin fragments into tiles, front-to-back within each tile.

    Returns per-tile fragment index arrays (into the batch) and pixel bounds
    (v0, v1, u0, u1) per tile, in fixed row-major tile order.  Sorting is a
    stable (depth, source id) order, identical regardless of threading.
    """
    ts = config.tile_size
    w, h = camera.width, camera.height
    tiles_x = (w + ts - 1) // ts
    tiles_y = (h + ts - 1) // ts

    bounds = []
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            bounds.append((ty * ts, min((ty + 1) * ts, h), tx * ts, min((tx + 1) * ts, w)))

    if frags.count == 0:
        return [np.empty(0, dtype=np.int64) for _ in bounds], bounds

    radii = _bounding_radii(frags, config)
    u, v = frags.mean2[:, 0], frags.mean2[:, 1]
    tx0 = np.clip(np.floor((u - radii) / ts), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((u + radii) / ts), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((v - radii) / ts), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((v + radii) / ts), 0, tiles_y - 1).astype(np.int64)
    offscreen = (u + radii < 0) | (u - radii > w - 1) | (v + radii < 0) | (v - radii > h - 1)

    pair_tiles = []
    pair_frags = []
    for i in np.flatnonzero(~offscreen):
        for ty in range(ty0[i], ty1[i] + 1):
            base = ty * tiles_x
            for tx in range(tx0[i], tx1[i] + 1):
                pair_tiles.append(base + tx)
                pair_frags.append(i)
    if not pair_tiles:
        return [np.empty(0, dtype=np.int64) for _ in bounds], bounds

    pair_tiles = np.asarray(pair_tiles, dtype=np.int64)
    pair_frags = np.asarray(pair_frags, dtype=np.int64)
    depth = frags.depth[pair_frags]
    source = frags.source[pair_frags]
    order = np.lexsort((source, depth, pair_tiles))
    pair_tiles = pair_tiles[order]
    pair_frags = pair_frags[order]

    tile_lists: list[np.ndarray] = []
    starts = np.searchsorted(pair_tiles, np.arange(len(bounds)))
    ends = np.searchsorted(pair_tiles, np.arange(len(bounds)), side="right")
    for t, (s, e) in enumerate(zip(starts, ends)):
        idx = pair_frags[s:e]
        if idx.size > config.tile_cap:
            if config.strict_tile_cap:
                raise TileOverflowError(
                    f"tile {t} holds {idx.size} fragments (cap {config.tile_cap})"
                )
            idx = idx[: config.tile_cap]  # keep the nearest; drop the farthest
        tile_lists.append(idx)
    return tile_lists, bounds


def _tile_pixels(bound: tuple[int, int, int, int], dtype) -> tuple[np.ndarray, np.ndarray]:
    v0, v1, u0, u1 = bound
    vs, us = np.meshgrid(np.arange(v0, v1), np.arange(u0, u1), indexing="ij")
    return us.reshape(-1).astype(dtype), vs.reshape(-1).astype(dtype)


def _conics(cov2: np.ndarray) -> np.ndarray:
    """Inverse 2x2 covariances, (K, 2, 2)."""
    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1]
    det = a * c - b * b
    inv = np.empty_like(cov2)
    inv[:, 0, 0] = c / det
    inv[:, 0, 1] = -b / det
    inv[:, 1, 0] = -b / det
    inv[:, 1, 1] = a / det
    return inv


def _composite_tile(frags, idx, bound, config, dtype):
    """Forward-composite one tile; returns (color, depth, alpha, n_contrib)."""
    us, vs = _tile_pixels(bound, dtype)
    p = us.size
    bg = np.asarray(config.background, dtype=dtype)
    if idx.size == 0:
        color = np.broadcast_to(bg, (p, 3)).copy()
        zeros = np.zeros(p, dtype)
        return color, zeros, zeros.copy(), np.zeros(p, np.int32), zeros.copy()

    conic = _conics(frags.cov2[idx])
    du = frags.mean2[idx, 0, None] - us[None, :]
    dv = frags.mean2[idx, 1, None] - vs[None, :]
    power = -0.5 * (
        conic[:, 0, 0, None] * du * du
        + 2.0 * conic[:, 0, 1, None] * du * dv
        + conic[:, 1, 1, None] * dv * dv
    )
    g = frags.opacity_base[idx, None] * np.exp(power)
    alpha = np.minimum(g, config.alpha_clamp)

    one_m = 1.0 - alpha
    t_excl = np.ones((idx.size + 1, p), dtype=dtype)
    np.cumprod(one_m, axis=0, out=t_excl[1:])
    include = t_excl[:-1] >= config.term_transmittance
    w = alpha * t_excl[:-1] * include

    color = np.einsum("kp,kc->pc", w, frags.color[idx])
    depth = np.einsum("kp,k->p", w, frags.depth[idx])
    m = include.sum(axis=0)
    t_stop = t_excl[m, np.arange(p)]
    color += t_stop[:, None] * bg[None, :]

    crossed = t_excl[1:] <= 0.5
    surface = crossed.any(axis=0)
    first = crossed.argmax(axis=0)
    median = np.where(surface, frags.depth[idx][first], 0.0)
    return color, depth, 1.0 - t_stop, m.astype(np.int32), median


def render(
    fragments: FragmentBatch,
    camera: CameraView,
    config: RenderConfig = RenderConfig(),
    want_context: bool = False,
):
    """Composite fragments into color, depth, alpha, and contribution counts.

    Depth is the raw alpha-weighted sum (background sentinel 0); pixel
    validity is carried by the alpha channel.  A second, non-differentiable
    median depth channel records where opacity first accumulates past 0.5.
    """
    h, w = camera.height, camera.width
    dtype = fragments.mean2.dtype if fragments.count else np.float64
    tile_frags, bounds = sort_fragments(fragments, camera, config)

    out = RenderOutput(
        color=np.zeros((h, w, 3), dtype=dtype),
        depth=np.zeros((h, w), dtype=dtype),
        alpha=np.zeros((h, w), dtype=dtype),
        n_contrib=np.zeros((h, w), dtype=np.int32),
        median_depth=np.zeros((h, w), dtype=dtype),
    )

    def run(tile_id: int):
        bound = bounds[tile_id]
        return tile_id, _composite_tile(fragments, tile_frags[tile_id], bound, config, dtype)

    results: list = [None] * len(bounds)
    if config.threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            for tile_id, res in pool.map(run, range(len(bounds))):
                results[tile_id] = res
    else:
        for tile_id in range(len(bounds)):
            results[tile_id] = run(tile_id)[1]

    for bound, res in zip(bounds, results):
        v0, v1, u0, u1 = bound
        sh = (v1 - v0, u1 - u0)
        color, depth, alpha, m, median = res
        out.color[v0:v1, u0:u1] = color.reshape(sh + (3,))
        out.depth[v0:v1, u0:u1] = depth.reshape(sh)
        out.alpha[v0:v1, u0:u1] = alpha.reshape(sh)
        out.n_contrib[v0:v1, u0:u1] = m.reshape(sh)
        out.median_depth[v0:v1, u0:u1] = median.reshape(sh)

    if want_context:
        ctx = RenderContext(fragments=fragments, camera=camera, config=config,
                            tile_frags=tile_frags, tile_bounds=bounds)
        return out, ctx
    return out


def _backward_tile(frags, idx, bound, config, d_color, d_depth, dtype):
    """Replay one tile's compositing and return per-fragment gradients."""
    us, vs = _tile_pixels(bound, dtype)
    p = us.size
    v0, v1, u0, u1 = bound
    dc = d_color[v0:v1, u0:u1].reshape(p, 3).astype(dtype, copy=False)
    dd = d_depth[v0:v1, u0:u1].reshape(p).astype(dtype, copy=False)
    bg = np.asarray(config.background, dtype=dtype)

    conic = _conics(frags.cov2[idx])
    du = frags.mean2[idx, 0, None] - us[None, :]
    dv = frags.mean2[idx, 1, None] - vs[None, :]
    power = -0.5 * (
        conic[:, 0, 0, None] * du * du
        + 2.0 * conic[:, 0, 1, None] * du * dv
        + conic[:, 1, 1, None] * dv * dv
    )
    exp_power = np.exp(power)
    g = frags.opacity_base[idx, None] * exp_power
    alpha = np.minimum(g, config.alpha_clamp)

    one_m = 1.0 - alpha
    t_excl = np.ones((idx.size + 1, p), dtype=dtype)
    np.cumprod(one_m, axis=0, out=t_excl[1:])
    include = t_excl[:-1] >= config.term_transmittance
    w = alpha * t_excl[:-1] * include
    m = include.sum(axis=0)
    t_stop = t_excl[m, np.arange(p)]

    # u_k = c_k . dC + d_k . dD  (per fragment, per pixel)
    u_kp = np.einsum("kc,pc->kp", frags.color[idx], dc) + frags.depth[idx, None] * dd[None, :]

    d_col = np.einsum("kp,pc->kc", w, dc)
    d_dep = np.einsum("kp,p->k", w, dd)

    wu = w * u_kp
    # suffix sum over later fragments plus the background transmittance term
    cs = np.cumsum(wu, axis=0)
    bg_dot = t_stop * (dc @ bg)
    s_after = (cs[-1][None, :] - cs) + bg_dot[None, :]
    d_alpha = (t_excl[:-1] * u_kp - s_after / one_m) * include

    d_g = d_alpha * (g < config.alpha_clamp)
    d_ob = np.einsum("kp,kp->k", d_g, exp_power)
    d_power = d_g * g

    # mean2/conic gradients reduce to low-order moments of d_power in (du, dv)
    pu = d_power * du
    pv = d_power * dv
    s_u = pu.sum(axis=1)
    s_v = pv.sum(axis=1)
    s_uu = np.einsum("kp,kp->k", pu, du)
    s_uv = np.einsum("kp,kp->k", pu, dv)
    s_vv = np.einsum("kp,kp->k", pv, dv)
    ca = conic[:, 0, 0]
    cb = conic[:, 0, 1]
    cc = conic[:, 1, 1]
    d_mean2 = np.stack([-(ca * s_u + cb * s_v), -(cb * s_u + cc * s_v)], axis=1)
    d_conic = np.empty((idx.size, 2, 2), dtype=dtype)
    d_conic[:, 0, 0] = -0.5 * s_uu
    d_conic[:, 0, 1] = -0.5 * s_uv
    d_conic[:, 1, 0] = d_conic[:, 0, 1]
    d_conic[:, 1, 1] = -0.5 * s_vv
    # conic = inv(cov2):  dL/dcov2 = -conic dL/dconic conic
    d_cov2 = -np.einsum("kab,kbc,kcd->kad", conic, d_conic, conic)
    return d_mean2, d_cov2, d_ob, d_dep, d_col


def render_backward(
    ctx: RenderContext, d_color: np.ndarray, d_depth: np.ndarray
) -> FragmentGrads:
    """Gradients of a scalar loss w.r.t. fragment inputs.

    ``d_color`` (H, W, 3) and ``d_depth`` (H, W) are the upstream gradients
    of the rendered color and raw composited depth.
    """
    frags = ctx.fragments
    dtype = frags.mean2.dtype if frags.count else np.float64
    grads = FragmentGrads(
        mean2=np.zeros((frags.count, 2), dtype=dtype),
        cov2=np.zeros((frags.count, 2, 2), dtype=dtype),
        opacity_base=np.zeros(frags.count, dtype=dtype),
        depth=np.zeros(frags.count, dtype=dtype),
        color=np.zeros((frags.count, 3), dtype=dtype),
    )
    if frags.count == 0:
        return grads

    def run(tile_id: int):
        idx = ctx.tile_frags[tile_id]
        if idx.size == 0:
            return tile_id, None
        return tile_id, _backward_tile(
            frags, idx, ctx.tile_bounds[tile_id], ctx.config, d_color, d_depth, dtype
        )

    results: list = [None] * len(ctx.tile_bounds)
    if ctx.config.threads > 1 and len(ctx.tile_bounds) > 1:
        with ThreadPoolExecutor(max_workers=ctx.config.threads) as pool:
            for tile_id, res in pool.map(run, range(len(ctx.tile_bounds))):
                results[tile_id] = res
    else:
        for tile_id in range(len(ctx.tile_bounds)):
            results[tile_id] = run(tile_id)[1]

    # merge in tile order so accumulation order never depends on threading
    for tile_id, res in enumerate(results):
        if res is None:
            continue
        idx = ctx.tile_frags[tile_id]
        d_mean2, d_cov2, d_ob, d_dep, d_col = res
        np.add.at(grads.mean2, idx, d_mean2)
        np.add.at(grads.cov2, idx, d_cov2)
        np.add.at(grads.opacity_base, idx, d_ob)
        np.add.at(grads.depth, idx, d_dep)
        np.add.at(grads.color, idx, d_col)
    return grads


def project_backward(
    proj: ProjectionContext, fgrads: FragmentGrads
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Chain fragment gradients back to slice-level quantities.

    Returns (d_mean3, d_cov3, d_decay, d_sigma) aligned with the full slice
    batch (zeros for culled primitives).
    """
    slices = proj.slices
    camera = proj.camera
    kept = proj.kept
    dtype = slices.mean3.dtype
    n = slices.mean3.shape[0]

    d_mean3 = np.zeros((n, 3), dtype=dtype)
    d_cov3 = np.zeros((n, 3, 3), dtype=dtype)
    d_decay = np.zeros(n, dtype=dtype)
    d_sigma = np.zeros(n, dtype=dtype)
    if kept.size == 0:
        return d_mean3, d_cov3, d_decay, d_sigma

    rot = camera.rotation.astype(dtype)
    tr = camera.translation.astype(dtype)
    mc = slices.mean3[kept] @ rot.T + tr
    x, y, z = mc[:, 0], mc[:, 1], mc[:, 2]
    j = _perspective_jacobians(mc, camera)
    t = np.einsum("kab,bc->kac", j, rot)

    g2 = fgrads.cov2  # fragment arrays align with kept order
    cov3_k = slices.cov3[kept]

    # cov2 = T cov3 T^T (+ const):  dcov3 = T^T G2 T,  dT = (G2 + G2^T) T cov3
    d_cov3_k = np.einsum("kba,kbc,kcd->kad", t, g2, t)
    g2_sym = g2 + np.swapaxes(g2, 1, 2)
    d_t = np.einsum("kab,kbc,kcd->kad", g2_sym, t, cov3_k)
    d_j = np.einsum("kab,cb->kac", d_t, rot)

    # mean2 = proj(mean_cam): exact Jacobian is J itself
    d_mc = np.einsum("kab,ka->kb", j, fgrads.mean2)
    # J depends on mean_cam as well
    fx, fy = camera.fx, camera.fy
    z2 = z * z
    z3 = z2 * z
    d_mc[:, 0] += d_j[:, 0, 2] * (-fx / z2)
    d_mc[:, 1] += d_j[:, 1, 2] * (-fy / z2)
    d_mc[:, 2] += (
        d_j[:, 0, 0] * (-fx / z2)
        + d_j[:, 0, 2] * (2.0 * fx * x / z3)
        + d_j[:, 1, 1] * (-fy / z2)
        + d_j[:, 1, 2] * (2.0 * fy * y / z3)
    )
    # fragment depth is mean_cam z
    d_mc[:, 2] += fgrads.depth

    d_mean3[kept] = d_mc @ rot
    d_cov3[kept] = d_cov3_k
    # opacity base = sigma * decay
    d_decay[kept] = fgrads.opacity_base * slices.sigma[kept]
    d_sigma[kept] = fgrads.opacity_base * slices.decay[kept]
    return d_mean3, d_cov3, d_decay, d_sigma


@dataclass
class FieldRenderContext:
    field: GaussianField
    time: float
    proj: ProjectionContext
    render_ctx: RenderContext


def render_field(
    field: GaussianField,
    t: float,
    camera: CameraView,
    config: RenderConfig = RenderConfig(),
    want_context: bool = False,
):
    """Slice the field at time ``t`` and rasterize it through ``camera``."""
    slices = slice_at_time(field, t)
    directions = None
    if field.sh_degree >= 1:
        rel = slices.mean3 - camera.center.astype(field.dtype)
        norm = np.linalg.norm(rel, axis=1, keepdims=True)
        directions = rel / np.maximum(norm, 1e-12)
    pre = eval_color(field, t, directions)
    colors = np.maximum(pre, 0.0)
    fragments, kept = project_gaussians(slices, colors, camera, config)
    proj = ProjectionContext(
        slices=slices, camera=camera, config=config, kept=kept,
        color_preclamp=pre, directions=directions,
    )
    if want_context:
        out, rctx = render(fragments, camera, config, want_context=True)
        return out, FieldRenderContext(field=field, time=t, proj=proj, render_ctx=rctx)
    return render(fragments, camera, config)


def render_field_backward(
    ctx: FieldRenderContext, d_color: np.ndarray, d_depth: np.ndarray
) -> ParamGrads:
    """Gradients of a scalar loss w.r.t. every parameter of the field."""
    field = ctx.field
    proj = ctx.proj
    fgrads = render_backward(ctx.render_ctx, d_color, d_depth)

    d_mean3, d_cov3, d_decay, d_sigma = project_backward(proj, fgrads)

    # color clamp: gradient passes only where the pre-clamp value is positive
    n = proj.slices.mean3.shape[0]
    d_pre = np.zeros((n, 3), dtype=field.dtype)
    d_pre[proj.kept] = fgrads.color * (proj.color_preclamp[proj.kept] > 0.0)
    color_grads, d_dirs = eval_color_backward(field, ctx.time, proj.directions, d_pre)

    if d_dirs is not None:
        # directions = (mean3 - center) / |mean3 - center|
        rel = proj.slices.mean3 - ctx.render_ctx.camera.center.astype(field.dtype)
        norm = np.linalg.norm(rel, axis=1, keepdims=True)
        norm = np.maximum(norm, 1e-12)
        unit = rel / norm
        d_rel = (d_dirs - unit * np.sum(d_dirs * unit, axis=1, keepdims=True)) / norm
        d_mean3 = d_mean3 + d_rel

    grads = slice_backward(field, ctx.time, d_mean3, d_cov3, d_decay, d_sigma)
    grads += color_grads
    return grads
