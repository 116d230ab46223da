"""Synthetic dynamic scenes with exact supervision signals.

Stands in for capture rigs and learned depth estimators: every scene ships
ground-truth RGB and depth streams plus simulated estimator outputs
(metric depth with noise/outliers + confidence, and per-frame monotonely
warped relative depth), all deterministic given the spec seed.

Two families:

gaussian-field: content is a set of 3D Gaussians with analytic motion
(static, linear, or sinusoidal), rendered through this package's own
rasterizer.  Self-consistent by construction: re-rendering the ground
truth reproduces the bundle bit for bit, so reconstruction error isolates
optimization quality rather than model mismatch.

textured-plane: a fronto-parallel checkered wall plus an optional moving
front panel, rendered by a closed-form ray tracer that shares no code
with the rasterizer.  Depth per pixel is the constant plane depth, which
bilinear resampling reproduces exactly; this family is both the
non-circular oracle for end-to-end runs and the geometry where the
consistency loop closes to float precision.

World axes follow the camera convention (x right, y down, z forward), so
look-at rotations stay proper without axis flips.  Rigs are static across
frames; timestamps are normalized to [0, 1].
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .cameras import CameraRig, CameraView
from .field import SliceBatch
from .fileio import read_pfm, read_png, write_pfm, write_png
from .raster import RenderConfig, project_gaussians, render

__all__ = [
    "SceneSpec",
    "SupervisionBundle",
    "SyntheticScene",
    "GaussianGroundTruth",
    "PlaneGroundTruth",
    "generate_scene",
    "training_rig",
    "simulate_mvs_depth",
    "simulate_mde_depth",
    "save_dataset",
    "load_dataset",
    "reference_spec",
    "plane_spec",
    "calibration_spec",
]

_FAMILIES = ("gaussian-field", "textured-plane")


@dataclass
class SceneSpec:
    """Everything needed to regenerate a scene deterministically."""

    seed: int = 0
    family: str = "gaussian-field"
    num_gaussians: int = 80
    num_views: int = 4
    num_frames: int = 12
    width: int = 64
    height: int = 64
    holdout_views: tuple[int, ...] = (2,)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # static | linear | sinusoidal population fractions
    motion_mix: tuple[float, float, float] = (0.5, 0.3, 0.2)
    # gaussian-field rig: arc of look-at cameras
    arc_degrees: float = 30.0
    camera_distance: float = 4.0
    focal: float = 80.0
    # textured-plane rig: parallel cameras on a line
    baseline: float = 0.02
    plane_depth: float = 2.0
    checker_cells: int = 5
    moving_patch: bool = True
    # estimator simulation defaults; consistency scoring tolerates noise
    # only up to ~0.1/(fx b / z) relative, so wide-baseline presets must
    # stay well below the narrow-baseline calibration levels
    mvs_sigma: float = 0.001
    mvs_outlier_rate: float = 0.05

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"family must be one of {_FAMILIES}, got {self.family!r}")
        if self.num_views < 2:
            raise ValueError("need at least 2 views (consistency needs a neighbor)")
        if self.num_frames < 1:
            raise ValueError("need at least 1 frame")
        if self.num_gaussians < 1:
            raise ValueError("need at least 1 primitive")
        self.holdout_views = tuple(int(v) for v in self.holdout_views)
        for v in self.holdout_views:
            if not 0 <= v < self.num_views:
                raise ValueError(f"holdout view {v} outside 0..{self.num_views - 1}")
        if len(set(self.holdout_views)) != len(self.holdout_views):
            raise ValueError("duplicate holdout views")
        if self.num_views - len(self.holdout_views) < 2:
            raise ValueError("fewer than 2 training views left after holdout")
        if abs(sum(self.motion_mix) - 1.0) > 1e-9 or min(self.motion_mix) < 0:
            raise ValueError("motion_mix must be non-negative and sum to 1")

    @property
    def training_views(self) -> list[int]:
        return [n for n in range(self.num_views) if n not in self.holdout_views]


@dataclass
class SupervisionBundle:
    """Per-(frame, view) supervision arrays; NaN marks absent depth."""

    rgb: np.ndarray  # (N_f, N_c, H, W, 3) linear [0, 1]
    depth_gt: np.ndarray  # (N_f, N_c, H, W)
    depth_mvs: np.ndarray
    prob: np.ndarray  # photometric probability of depth_mvs
    depth_mde: np.ndarray  # per-frame relative depth

    def select_views(self, views: list[int]) -> "SupervisionBundle":
        idx = list(views)
        return SupervisionBundle(
            self.rgb[:, idx],
            self.depth_gt[:, idx],
            self.depth_mvs[:, idx],
            self.prob[:, idx],
            self.depth_mde[:, idx],
        )


# ---------------------------------------------------------------------------
# ground-truth content


def _lookat(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera rotation for a camera at center looking at target."""
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    down = np.array([0.0, 1.0, 0.0])
    down = down - (down @ fwd) * fwd
    norm = np.linalg.norm(down)
    if norm < 1e-9:  # looking straight along the vertical axis
        down = np.array([0.0, 0.0, 1.0]) - fwd * fwd[2]
        norm = np.linalg.norm(down)
    down /= norm
    right = np.cross(down, fwd)
    return np.stack([right, down, fwd])


def _quat_to_mat3(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass
class GaussianGroundTruth:
    """Analytic-motion 3D Gaussians rendered by the package rasterizer.

    Every primitive follows base + velocity * tau + amp * sin(2 pi freq
    tau + phase); static and linear primitives simply have zero amplitude
    or velocity.  Shape, opacity, and color are constant over time.

    Color images come from the rasterizer, so re-rendering the truth
    reproduces them bit for bit.  Depth supervision instead traces an
    opaque proxy surface: the one-sigma ellipsoid of each content
    primitive plus an optional backdrop plane.  A matcher sees surfaces,
    not transparency-weighted blends, and only a true surface gives
    multi-view consistent depth.
    """

    base: np.ndarray  # (N, 3)
    velocity: np.ndarray  # (N, 3)
    amplitude: np.ndarray  # (N, 3)
    frequency: np.ndarray  # (N,)
    phase: np.ndarray  # (N,)
    cov3: np.ndarray  # (N, 3, 3)
    sigma: np.ndarray  # (N,) opacity
    colors: np.ndarray  # (N, 3)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    num_surface: int | None = None  # primitives traced as surface; None = all
    backdrop_depth: float | None = None  # world-z plane behind the content

    def positions_at(self, tau: float) -> np.ndarray:
        wave = np.sin(2.0 * np.pi * self.frequency * tau + self.phase)
        return self.base + self.velocity * tau + self.amplitude * wave[:, None]

    def slice_at(self, tau: float) -> SliceBatch:
        n = self.base.shape[0]
        return SliceBatch(
            mean3=self.positions_at(tau),
            cov3=self.cov3,
            decay=np.ones(n),
            sigma=self.sigma,
            time=tau,
        )

    def trace_depth(self, camera: CameraView, tau: float) -> np.ndarray:
        """First-hit z depth of the proxy surface; NaN where nothing is hit.

        Rays are parameterized as x = origin + t * r with r chosen so that
        t equals camera z depth directly.  A primitive is hit where the
        quadratic (x - c)^T cov3^{-1} (x - c) = 1 has a positive root.
        """
        h, w = camera.height, camera.width
        vs, us = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        dirs = np.stack(
            [(us - camera.cx) / camera.fx, (vs - camera.cy) / camera.fy,
             np.ones((h, w))], axis=-1,
        ).reshape(-1, 3)
        rays = dirs @ camera.rotation  # R^T dirs, one per pixel
        origin = camera.center
        best = np.full(rays.shape[0], np.inf)

        k = self.base.shape[0] if self.num_surface is None else self.num_surface
        centers = self.positions_at(tau)[:k]
        solid = self.sigma[:k] >= 0.5  # translucent wisps are not surfaces
        for i in np.flatnonzero(solid):
            m = np.linalg.inv(self.cov3[i])
            u = origin - centers[i]
            mr = rays @ m
            a = (mr * rays).sum(axis=1)
            b = mr @ u
            c0 = float(u @ m @ u) - 1.0
            disc = b * b - a * c0
            hit = disc >= 0.0
            t = np.full_like(best, np.inf)
            root = (-b[hit] - np.sqrt(disc[hit])) / a[hit]
            t[hit] = np.where(root > 1e-3, root, np.inf)
            best = np.minimum(best, t)

        if self.backdrop_depth is not None:
            t_plane = (self.backdrop_depth - origin[2]) / rays[:, 2]
            best = np.minimum(best, np.where(t_plane > 1e-3, t_plane, np.inf))
        depth = np.where(np.isfinite(best), best, np.nan)
        return depth.reshape(h, w)

    def render_view(self, camera: CameraView, tau: float) -> tuple[np.ndarray, np.ndarray]:
        config = RenderConfig(background=self.background)
        frags, _ = project_gaussians(self.slice_at(tau), self.colors, camera, config)
        out = render(frags, camera, config)
        return out.color, self.trace_depth(camera, tau)


@dataclass
class PlaneGroundTruth:
    """Closed-form ray tracer: checkered wall plus optional moving panel.

    Shares no code with the rasterizer.  Depth is the z distance to
    whichever fronto-parallel plane the pixel ray hits first; color comes
    from a seeded checker palette.  The panel sits in front of the wall
    and slides linearly over normalized time.
    """

    wall_depth: float
    cell_size: float
    wall_palette: np.ndarray  # (K, K, 3) per-cell colors
    panel: bool
    panel_depth: float
    panel_half: tuple[float, float]
    panel_start: np.ndarray  # (2,) center (x, y) at tau 0
    panel_velocity: np.ndarray  # (2,) per unit tau
    panel_palette: np.ndarray  # (K, K, 3)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def _palette_color(self, palette: np.ndarray, xs: np.ndarray, ys: np.ndarray):
        k = palette.shape[0]
        ix = np.floor(xs / self.cell_size).astype(np.int64) % k
        iy = np.floor(ys / self.cell_size).astype(np.int64) % k
        return palette[iy, ix]

    def render_view(self, camera: CameraView, tau: float) -> tuple[np.ndarray, np.ndarray]:
        h, w = camera.height, camera.width
        vs, us = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        # rays through pixel centers; rig cameras are axis-aligned, so a
        # plane z = z0 is hit where the ray's camera z reaches z0 - cam_z
        center = camera.center
        dir_x = (us - camera.cx) / camera.fx
        dir_y = (vs - camera.cy) / camera.fy

        depth_wall = self.wall_depth - center[2]
        wx = center[0] + dir_x * depth_wall
        wy = center[1] + dir_y * depth_wall
        rgb = self._palette_color(self.wall_palette, wx, wy)
        depth = np.full((h, w), depth_wall)

        if self.panel:
            depth_panel = self.panel_depth - center[2]
            px = center[0] + dir_x * depth_panel
            py = center[1] + dir_y * depth_panel
            cx, cy = self.panel_start + self.panel_velocity * tau
            inside = (np.abs(px - cx) <= self.panel_half[0]) & (
                np.abs(py - cy) <= self.panel_half[1]
            )
            panel_rgb = self._palette_color(self.panel_palette, px - cx, py - cy)
            rgb = np.where(inside[:, :, None], panel_rgb, rgb)
            depth = np.where(inside, depth_panel, depth)
        return rgb, depth


def training_rig(spec: SceneSpec, rig: CameraRig) -> CameraRig:
    """Rig over training views only, reindexed to 0..k-1."""
    keep = spec.training_views
    views = []
    for t in range(rig.num_frames):
        for new_idx, old_idx in enumerate(keep):
            v = rig.view(t, old_idx)
            views.append(CameraView(
                fx=v.fx, fy=v.fy, cx=v.cx, cy=v.cy,
                width=v.width, height=v.height,
                rotation=v.rotation, translation=v.translation,
                view_index=new_idx, frame_index=t,
            ))
    return CameraRig(views)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    rig: CameraRig
    ground_truth: object  # GaussianGroundTruth | PlaneGroundTruth
    bundle: SupervisionBundle

    def training_rig(self) -> CameraRig:
        return training_rig(self.spec, self.rig)

    def training_bundle(self) -> SupervisionBundle:
        return self.bundle.select_views(self.spec.training_views)


# ---------------------------------------------------------------------------
# estimator simulation


def simulate_mvs_depth(
    gt_depth: np.ndarray,
    sigma: float,
    outlier_rate: float,
    seed,
    *,
    outlier_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Multiplicative-noise depth with uniform outliers and confidence.

    depth = gt * (1 + eps), eps ~ N(0, sigma^2) i.i.d.; a fraction
    outlier_rate of pixels is replaced by uniform draws from
    [0.5 min, 2 max] of the valid ground truth, with confidence drawn
    from U(0, 0.4) there and 1 elsewhere.  Sentinel (NaN) ground truth
    stays sentinel with confidence 0.  An explicit boolean outlier_mask
    overrides the random pattern (the rate is ignored), which lets a
    dataset keep failure regions fixed across frames the way real
    matchers do.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if not 0.0 <= outlier_rate <= 1.0:
        raise ValueError("outlier_rate must be in [0, 1]")
    gt = np.asarray(gt_depth, dtype=np.float64)
    rng = np.random.default_rng(seed)
    ok = np.isfinite(gt)
    depth = np.where(ok, gt * (1.0 + sigma * rng.standard_normal(gt.shape)), np.nan)
    prob = np.where(ok, 1.0, 0.0)
    if outlier_mask is not None:
        bad = np.asarray(outlier_mask, dtype=bool) & ok
    else:
        bad = (rng.uniform(size=gt.shape) < outlier_rate) & ok
    if bad.any() and ok.any():
        lo, hi = 0.5 * float(gt[ok].min()), 2.0 * float(gt[ok].max())
        depth[bad] = rng.uniform(lo, hi, size=int(bad.sum()))
        prob[bad] = rng.uniform(0.0, 0.4, size=int(bad.sum()))
    return depth, prob


def simulate_mde_depth(
    gt_depth: np.ndarray,
    scale: float,
    shift: float,
    gamma: float = 1.0,
) -> np.ndarray:
    """Order-preserving relative depth: scale * gt**gamma + shift.

    A strictly monotone warp of positive ground truth: rankings inside a
    frame survive, while per-frame (scale, shift, gamma) destroy metric
    and cross-frame scale consistency, which is exactly the failure mode
    of per-frame monocular estimators.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    if not 0.7 <= gamma <= 1.3:
        raise ValueError("gamma must lie in [0.7, 1.3] (strictly monotone warp)")
    gt = np.asarray(gt_depth, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return np.where(np.isfinite(gt), scale * np.power(gt, gamma) + shift, np.nan)


# ---------------------------------------------------------------------------
# generation


def _gaussian_rig(spec: SceneSpec) -> CameraRig:
    half = np.deg2rad(spec.arc_degrees) / 2.0
    angles = np.linspace(-half, half, spec.num_views)
    target = np.zeros(3)
    views = []
    for t in range(spec.num_frames):
        for n, ang in enumerate(angles):
            center = spec.camera_distance * np.array([np.sin(ang), 0.0, -np.cos(ang)])
            rot = _lookat(center, target)
            views.append(CameraView(
                fx=spec.focal, fy=spec.focal,
                cx=(spec.width - 1) / 2.0, cy=(spec.height - 1) / 2.0,
                width=spec.width, height=spec.height,
                rotation=rot, translation=-rot @ center,
                view_index=n, frame_index=t,
            ))
    return CameraRig(views)


def _plane_rig(spec: SceneSpec) -> CameraRig:
    offsets = (np.arange(spec.num_views) - (spec.num_views - 1) / 2.0) * spec.baseline
    views = []
    for t in range(spec.num_frames):
        for n, x in enumerate(offsets):
            views.append(CameraView(
                fx=spec.focal, fy=spec.focal,
                cx=(spec.width - 1) / 2.0, cy=(spec.height - 1) / 2.0,
                width=spec.width, height=spec.height,
                rotation=np.eye(3), translation=np.array([-x, 0.0, 0.0]),
                view_index=n, frame_index=t,
            ))
    return CameraRig(views)


def _gaussian_content(spec: SceneSpec, rng: np.random.Generator) -> GaussianGroundTruth:
    n = spec.num_gaussians
    base = rng.uniform(-1.0, 1.0, (n, 3)) * np.array([1.0, 0.8, 0.5])
    kinds = rng.choice(3, size=n, p=list(spec.motion_mix))
    velocity = np.where(
        (kinds == 1)[:, None], rng.uniform(-0.35, 0.35, (n, 3)), 0.0
    )
    amplitude = np.where(
        (kinds == 2)[:, None], rng.uniform(-0.25, 0.25, (n, 3)), 0.0
    )
    frequency = rng.uniform(0.5, 1.5, n)
    phase = rng.uniform(0.0, 2.0 * np.pi, n)

    # chunky blobs: silhouette rings are where depth consistency honestly
    # fails, so cores must outweigh rims at the working resolution
    scales = np.exp(rng.uniform(np.log(0.08), np.log(0.2), (n, 3)))
    cov3 = np.empty((n, 3, 3))
    for i in range(n):
        rot = _quat_to_mat3(rng.standard_normal(4))
        cov3[i] = rot @ np.diag(scales[i] ** 2) @ rot.T
    # near-opaque content: surface depth is only multi-view consistent when
    # a single primitive dominates each ray
    sigma = rng.uniform(0.85, 0.99, n)
    colors = rng.uniform(0.1, 1.0, (n, 3))

    # static backdrop: a coarse grid of wide, z-flattened blobs behind the
    # content so depth supervision exists over most of the image instead of
    # only on sparse foreground splats
    z_back = 0.3 * spec.camera_distance
    span_x = 1.3 * (spec.width / 2.0 / spec.focal) * (spec.camera_distance + z_back)
    span_y = span_x * spec.height / spec.width
    gx, gy = np.meshgrid(np.linspace(-span_x, span_x, 4), np.linspace(-span_y, span_y, 4))
    k = gx.size
    back_base = np.stack([gx.ravel(), gy.ravel(), np.full(k, z_back)], axis=1)
    lateral = 0.55 * (2.0 * span_x / 3.0)
    back_cov = np.tile(np.diag([lateral**2, lateral**2, 0.05**2]), (k, 1, 1))

    return GaussianGroundTruth(
        base=np.concatenate([base, back_base]),
        velocity=np.concatenate([velocity, np.zeros((k, 3))]),
        amplitude=np.concatenate([amplitude, np.zeros((k, 3))]),
        frequency=np.concatenate([frequency, np.ones(k)]),
        phase=np.concatenate([phase, np.zeros(k)]),
        cov3=np.concatenate([cov3, back_cov]),
        sigma=np.concatenate([sigma, np.full(k, 0.95)]),
        colors=np.concatenate([colors, rng.uniform(0.15, 0.9, (k, 3))]),
        background=spec.background,
        # backdrop blobs are flattened around z_back; the depth tracer treats
        # them as that plane, and only the content blobs as ellipsoids
        num_surface=n,
        backdrop_depth=z_back,
    )


def _plane_content(spec: SceneSpec, rng: np.random.Generator) -> PlaneGroundTruth:
    # field of view on the wall, so the checker cells scale with the image
    span = spec.plane_depth * spec.width / spec.focal
    cell = span / spec.checker_cells
    k = 16
    wall = rng.uniform(0.1, 1.0, (k, k, 3))
    panel = rng.uniform(0.1, 1.0, (k, k, 3))
    return PlaneGroundTruth(
        wall_depth=spec.plane_depth,
        cell_size=cell,
        wall_palette=wall,
        panel=spec.moving_patch,
        panel_depth=0.75 * spec.plane_depth,
        panel_half=(0.18 * span, 0.14 * span),
        panel_start=np.array([-0.12 * span, 0.02 * span]),
        panel_velocity=np.array([0.24 * span, 0.0]),
        panel_palette=panel,
        background=spec.background,
    )


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Build content, rig, and the full supervision bundle for a spec.

    Deterministic: the spec seed drives content, per-view persistent MVS
    outlier patterns, per-(frame, view) noise, and per-(frame, view)
    monocular warp parameters.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.family == "gaussian-field":
        rig = _gaussian_rig(spec)
        gt = _gaussian_content(spec, rng)
    else:
        rig = _plane_rig(spec)
        gt = _plane_content(spec, rng)

    nf, nc, h, w = spec.num_frames, spec.num_views, spec.height, spec.width
    rgb = np.empty((nf, nc, h, w, 3))
    depth_gt = np.empty((nf, nc, h, w))
    for t in range(nf):
        tau = rig.frame_time(t)
        for n in range(nc):
            rgb[t, n], depth_gt[t, n] = gt.render_view(rig.view(t, n), tau)

    # matcher failures persist across frames within a view; noise does not
    pattern_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    patterns = pattern_rng.uniform(size=(nc, h, w)) < spec.mvs_outlier_rate
    depth_mvs = np.empty_like(depth_gt)
    prob = np.empty_like(depth_gt)
    depth_mde = np.empty_like(depth_gt)
    mde_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2]))
    for t in range(nf):
        for n in range(nc):
            depth_mvs[t, n], prob[t, n] = simulate_mvs_depth(
                depth_gt[t, n],
                spec.mvs_sigma,
                spec.mvs_outlier_rate,
                seed=np.random.SeedSequence([spec.seed, 3, t, n]),
                outlier_mask=patterns[n],
            )
            depth_mde[t, n] = simulate_mde_depth(
                depth_gt[t, n],
                scale=float(mde_rng.uniform(0.6, 1.6)),
                shift=float(mde_rng.uniform(0.0, 0.4)),
                gamma=float(mde_rng.uniform(0.7, 1.3)),
            )
    bundle = SupervisionBundle(rgb, depth_gt, depth_mvs, prob, depth_mde)
    return SyntheticScene(spec, rig, gt, bundle)


# ---------------------------------------------------------------------------
# presets


def reference_spec(seed: int = 0, **overrides) -> SceneSpec:
    """Default training scene: 3 training views + 1 held-out on a 20 degree arc.

    With three training views the consistency score has two neighbor terms
    against the fixed 1.8 cutoff, so a pixel passes only when it agrees
    with both neighbors in nearly every frame.  The arc is kept gentle and
    the content chunky because the score ceiling is set by co-visibility
    of the widest camera pair and by silhouette rings around each blob.
    """
    args = dict(num_views=4, holdout_views=(2,), num_gaussians=48,
                arc_degrees=20.0)
    args.update(overrides)
    return SceneSpec(seed=seed, **args)


def plane_spec(seed: int = 0, **overrides) -> SceneSpec:
    """Independently rendered moving-panel scene for non-circular checks."""
    args = dict(
        family="textured-plane",
        num_gaussians=1,
        num_views=4,
        num_frames=12,
        holdout_views=(2,),
        baseline=0.05,
        focal=80.0,
        moving_patch=True,
        mvs_sigma=0.005,
    )
    args.update(overrides)
    return SceneSpec(seed=seed, **args)


def calibration_spec(seed: int = 0, **overrides) -> SceneSpec:
    """Static wall with a small-disparity rig: the consistency loop closes
    to float precision, so scores calibrate against their ideal value."""
    args = dict(
        family="textured-plane",
        num_gaussians=1,
        num_views=3,
        num_frames=8,
        holdout_views=(),
        baseline=0.01,  # 0.4 px disparity at focal 80, depth 2
        focal=80.0,
        moving_patch=False,
        mvs_sigma=0.02,
        mvs_outlier_rate=0.2,
    )
    args.update(overrides)
    return SceneSpec(seed=seed, **args)


# ---------------------------------------------------------------------------
# dataset I/O


def _name(prefix: str, t: int, n: int, ext: str) -> str:
    return f"{prefix}_t{t:04d}_v{n:02d}.{ext}"


def save_dataset(path: str, scene: SyntheticScene) -> None:
    """Write scene.json plus per-(frame, view) images and depth maps.

    RGB goes to 8-bit PNG (quantized), depths and probabilities to PFM.
    File bytes are a pure function of the scene, so identical seeds give
    identical trees.
    """
    os.makedirs(path, exist_ok=True)
    spec_dict = asdict(scene.spec)
    doc = {
        "spec": spec_dict,
        "views": [v.to_json_dict() for v in scene.rig.all_views()],
    }
    with open(os.path.join(path, "scene.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    b = scene.bundle
    for t in range(scene.spec.num_frames):
        for n in range(scene.spec.num_views):
            write_png(os.path.join(path, _name("rgb", t, n, "png")), b.rgb[t, n])
            write_pfm(os.path.join(path, _name("depth_gt", t, n, "pfm")), b.depth_gt[t, n])
            write_pfm(os.path.join(path, _name("depth_mvs", t, n, "pfm")), b.depth_mvs[t, n])
            write_pfm(os.path.join(path, _name("prob", t, n, "pfm")), b.prob[t, n])
            write_pfm(os.path.join(path, _name("depth_mde", t, n, "pfm")), b.depth_mde[t, n])


@dataclass
class LoadedDataset:
    spec: SceneSpec
    rig: CameraRig
    bundle: SupervisionBundle

    def training_rig(self) -> CameraRig:
        return training_rig(self.spec, self.rig)

    def training_bundle(self) -> SupervisionBundle:
        return self.bundle.select_views(self.spec.training_views)


def load_dataset(path: str) -> LoadedDataset:
    """Read a dataset directory written by save_dataset.

    RGB comes back as linear float (8-bit quantized); depth arrays as
    float32-precision values upcast to float64.
    """
    with open(os.path.join(path, "scene.json")) as fh:
        doc = json.load(fh)
    sd = dict(doc["spec"])
    sd["holdout_views"] = tuple(sd.get("holdout_views", ()))
    sd["background"] = tuple(sd.get("background", (0.0, 0.0, 0.0)))
    sd["motion_mix"] = tuple(sd.get("motion_mix", (0.5, 0.3, 0.2)))
    spec = SceneSpec(**sd)
    rig = CameraRig([CameraView.from_json_dict(v) for v in doc["views"]])
    nf, nc, h, w = spec.num_frames, spec.num_views, spec.height, spec.width
    rgb = np.empty((nf, nc, h, w, 3))
    arrays = {
        "depth_gt": np.empty((nf, nc, h, w)),
        "depth_mvs": np.empty((nf, nc, h, w)),
        "prob": np.empty((nf, nc, h, w)),
        "depth_mde": np.empty((nf, nc, h, w)),
    }
    for t in range(nf):
        for n in range(nc):
            rgb[t, n] = read_png(os.path.join(path, _name("rgb", t, n, "png")))
            for key, arr in arrays.items():
                arr[t, n] = read_pfm(os.path.join(path, _name(key, t, n, "pfm")))
    bundle = SupervisionBundle(rgb, **arrays)
    return LoadedDataset(spec, rig, bundle)
