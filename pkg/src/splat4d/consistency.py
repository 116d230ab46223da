"""Multi-view depth consistency: reprojection scoring, masks, fused clouds.

Depth maps estimated independently per view disagree wherever matching
failed.  A pixel is trusted when the reprojection loop closes: lift the
pixel with its depth, drop into a neighbor view, read the neighbor's depth
there, lift again and land back in the reference.  The loop yields a pixel
error (distance between start and landing point) and a depth error (the
reference's own map resampled at the landing point versus the starting
depth).  Scores aggregate exp(-(xi_p + beta * xi_d)) over every neighbor
view and every frame, so a pixel consistent across spacetime scores close
to the neighbor count while mismatches decay to zero.

Thresholding the score map together with the matcher's photometric
probability yields per-(frame, view) validity masks.  The masks gate two
consumers: the fused initialization point cloud (frame 0) and the masked
smooth-L1 structure loss on rendered depth.

Depth sampling is probability aware: interpolation taps whose photometric
probability falls below the cutoff are dropped and the remaining weights
renormalized, so isolated outlier pixels do not poison their neighbors'
samples.  Occluded loops are detected by comparing the projected depth
against the neighbor's sampled depth; a relative gap above the cutoff
invalidates the pair (contributing zero consistency, not a penalty).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cameras import CameraRig, CameraView, backproject, bilinear_sample, project

__all__ = [
    "BETA_DEFAULT",
    "SCORE_THRESHOLD_DEFAULT",
    "PROB_THRESHOLD_DEFAULT",
    "OCCLUSION_REL_GAP_DEFAULT",
    "DepthStream",
    "ConsistencyMask",
    "EmptyFusionError",
    "reprojection_errors",
    "dynamic_consistency",
    "build_masks",
    "fuse_point_cloud",
    "structure_loss",
]

BETA_DEFAULT = 200.0
SCORE_THRESHOLD_DEFAULT = 1.8
PROB_THRESHOLD_DEFAULT = 0.5
OCCLUSION_REL_GAP_DEFAULT = 0.1

_STREAM_KINDS = ("mvs-metric", "mde-relative", "ground-truth")


class EmptyFusionError(RuntimeError):
    """No pixel survived masking; fusion has nothing to backproject."""


@dataclass
class DepthStream:
    """Per-(frame, view) depth maps with optional photometric probability.

    depth: (N_f, N_c, H, W); invalid pixels carry NaN.  Metric and
    ground-truth kinds must be positive wherever finite.
    prob:  matching shape in [0, 1], or None when the estimator has no
    confidence output.
    """

    depth: np.ndarray
    prob: np.ndarray | None = None
    kind: str = "mvs-metric"

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 4:
            raise ValueError(f"depth must be (N_f, N_c, H, W), got {self.depth.shape}")
        if self.kind not in _STREAM_KINDS:
            raise ValueError(f"kind must be one of {_STREAM_KINDS}, got {self.kind!r}")
        if self.prob is not None:
            self.prob = np.asarray(self.prob, dtype=np.float64)
            if self.prob.shape != self.depth.shape:
                raise ValueError(
                    f"prob shape {self.prob.shape} != depth shape {self.depth.shape}"
                )
        if self.kind in ("mvs-metric", "ground-truth"):
            finite = np.isfinite(self.depth)
            if np.any(self.depth[finite] <= 0.0):
                raise ValueError(f"{self.kind} depths must be positive where finite")

    @property
    def num_frames(self) -> int:
        return self.depth.shape[0]

    @property
    def num_views(self) -> int:
        return self.depth.shape[1]


@dataclass
class ConsistencyMask:
    """Scores per reference view plus per-(frame, view) boolean masks."""

    scores: np.ndarray  # (N_c, H, W)
    masks: np.ndarray  # (N_f, N_c, H, W) bool
    score_threshold: float = SCORE_THRESHOLD_DEFAULT
    prob_threshold: float = PROB_THRESHOLD_DEFAULT
    extras: dict = field(default_factory=dict)


def _usable(depth: np.ndarray, prob: np.ndarray | None, prob_threshold: float):
    """Taps worth interpolating: finite, positive, confident enough."""
    ok = np.isfinite(depth) & (depth > 0.0)
    if prob is not None:
        ok &= prob >= prob_threshold
    return ok


def _pixel_grid(width: int, height: int) -> np.ndarray:
    vs, us = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([us.reshape(-1), vs.reshape(-1)], axis=1).astype(np.float64)


def reprojection_errors(
    ref: CameraView,
    ref_depth: np.ndarray,
    nbr: CameraView,
    nbr_depth: np.ndarray,
    *,
    ref_prob: np.ndarray | None = None,
    nbr_prob: np.ndarray | None = None,
    prob_threshold: float = PROB_THRESHOLD_DEFAULT,
    occlusion_rel_gap: float = OCCLUSION_REL_GAP_DEFAULT,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Round-trip reprojection errors for every reference pixel.

    Lifts each reference pixel with its own depth, projects it into the
    neighbor, samples the neighbor's depth there, lifts again and projects
    back.  Returns (xi_p, xi_d, valid) maps of shape (H, W):

    xi_p: distance in pixels between the start pixel and the landing point.
    xi_d: |D(p) - D(p'')| / D(p), both read from the reference's own map
          (the landing-point value bilinearly sampled).
    valid: False where any step left the image, went behind a camera, hit
          sentinel depth, or failed the occlusion test; xi maps carry NaN
          there.  Invalid is a value, scored as zero consistency.
    """
    d_ref = np.asarray(ref_depth, dtype=np.float64)
    d_nbr = np.asarray(nbr_depth, dtype=np.float64)
    h, w = d_ref.shape
    if (h, w) != (ref.height, ref.width):
        raise ValueError(f"ref depth {d_ref.shape} does not match camera {ref.height}x{ref.width}")
    if d_nbr.shape != (nbr.height, nbr.width):
        raise ValueError("nbr depth does not match camera size")

    grid = _pixel_grid(w, h)
    d0 = d_ref.reshape(-1)
    ok = np.isfinite(d0) & (d0 > 0.0)

    with np.errstate(invalid="ignore"):
        world = backproject(ref, grid, np.where(ok, d0, 1.0))
        p1, z1 = project(nbr, world)
        ok &= np.isfinite(z1) & (z1 > 0.0) & np.isfinite(p1).all(axis=1)
        p1 = np.where(ok[:, None], p1, 0.0)

        nbr_taps = _usable(d_nbr, nbr_prob, prob_threshold)
        d1, v1 = bilinear_sample(d_nbr, p1, tap_valid=nbr_taps)
        ok &= v1

        # occlusion: the surface the neighbor sees in that direction is much
        # closer/farther than the lifted point, so the loop says nothing
        rel_gap = np.abs(d1 - z1) / np.where(ok, z1, 1.0)
        ok &= ~(rel_gap > occlusion_rel_gap)

        world2 = backproject(nbr, p1, np.where(ok, d1, 1.0))
        p2, z2 = project(ref, world2)
        ok &= np.isfinite(z2) & (z2 > 0.0) & np.isfinite(p2).all(axis=1)
        p2 = np.where(ok[:, None], p2, 0.0)

        ref_taps = _usable(d_ref, ref_prob, prob_threshold)
        d2, v2 = bilinear_sample(d_ref, p2, tap_valid=ref_taps)
        ok &= v2

        xi_p = np.linalg.norm(grid - p2, axis=1)
        xi_d = np.abs(d0 - d2) / d0
    xi_p = np.where(ok, xi_p, np.nan).reshape(h, w)
    xi_d = np.where(ok, xi_d, np.nan).reshape(h, w)
    return xi_p, xi_d, ok.reshape(h, w)


def _score_one_view(
    stream: DepthStream,
    rig: CameraRig,
    ref_idx: int,
    frames: list[int],
    beta: float,
    prob_threshold: float,
    occlusion_rel_gap: float,
) -> np.ndarray:
    n_c, h, w = stream.depth.shape[1:]
    acc = np.zeros((h, w))
    for t in frames:
        ref_cam = rig.view(t, ref_idx)
        for nbr_idx in range(n_c):
            if nbr_idx == ref_idx:
                continue
            xi_p, xi_d, ok = reprojection_errors(
                ref_cam,
                stream.depth[t, ref_idx],
                rig.view(t, nbr_idx),
                stream.depth[t, nbr_idx],
                ref_prob=None if stream.prob is None else stream.prob[t, ref_idx],
                nbr_prob=None if stream.prob is None else stream.prob[t, nbr_idx],
                prob_threshold=prob_threshold,
                occlusion_rel_gap=occlusion_rel_gap,
            )
            acc += np.where(ok, np.exp(-(xi_p + beta * xi_d)), 0.0)
    return acc / len(frames)


def dynamic_consistency(
    stream: DepthStream,
    rig: CameraRig,
    *,
    beta: float = BETA_DEFAULT,
    prob_threshold: float = PROB_THRESHOLD_DEFAULT,
    occlusion_rel_gap: float = OCCLUSION_REL_GAP_DEFAULT,
    frame_stride: int = 1,
    threads: int = 1,
) -> np.ndarray:
    """Consistency score c(p) per reference view, aggregated over spacetime.

    c(p) = (1 / N_f) sum_t sum_{neighbors} exp(-(xi_p + beta xi_d)), with
    invalid pairs contributing 0, so c ranges over [0, N_c - 1].  Frames can
    be strided for long clips; the divisor is the number of frames used.
    Each reference view's map is independent, so threading over views keeps
    the output bit-identical to the sequential path.
    """
    if stream.num_views != rig.num_views or stream.num_frames != rig.num_frames:
        raise ValueError(
            f"stream ({stream.num_frames} frames, {stream.num_views} views) does not "
            f"match rig ({rig.num_frames} frames, {rig.num_views} views)"
        )
    if frame_stride < 1:
        raise ValueError("frame_stride must be >= 1")
    frames = list(range(0, stream.num_frames, frame_stride))

    def run(ref_idx: int) -> np.ndarray:
        return _score_one_view(
            stream, rig, ref_idx, frames, beta, prob_threshold, occlusion_rel_gap
        )

    n_c = stream.num_views
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            maps = list(pool.map(run, range(n_c)))
    else:
        maps = [run(i) for i in range(n_c)]
    return np.stack(maps, axis=0)


def build_masks(
    scores: np.ndarray,
    stream: DepthStream,
    *,
    score_threshold: float = SCORE_THRESHOLD_DEFAULT,
    prob_threshold: float = PROB_THRESHOLD_DEFAULT,
) -> ConsistencyMask:
    """Threshold scores and photometric probability into validity masks.

    mask[t, n] is true where the view's score clears score_threshold, the
    pixel's probability clears prob_threshold (all true when the stream has
    no probability), and the depth itself is a finite positive value.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n_f, n_c, h, w = stream.depth.shape
    if scores.shape != (n_c, h, w):
        raise ValueError(f"scores shape {scores.shape} != ({n_c}, {h}, {w})")
    passed = scores >= score_threshold
    masks = np.empty((n_f, n_c, h, w), dtype=bool)
    for t in range(n_f):
        for n in range(n_c):
            m = passed[n] & np.isfinite(stream.depth[t, n]) & (stream.depth[t, n] > 0.0)
            if stream.prob is not None:
                m &= stream.prob[t, n] >= prob_threshold
            masks[t, n] = m
    return ConsistencyMask(scores, masks, score_threshold, prob_threshold)


def fuse_point_cloud(
    depths: np.ndarray,
    colors: np.ndarray,
    masks: np.ndarray,
    rig: CameraRig,
    *,
    frame: int = 0,
    cap: int = 200_000,
    voxel_size: float = 0.02,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Backproject masked first-frame pixels into one colored point set.

    depths/colors/masks are (N_c, H, W[, 3]) for the chosen frame.  Views
    are swept in index order and pixels row-major, so the pre-deduplication
    point order is deterministic.  Duplicate surface hits are merged by
    voxel-grid deduplication (first point per cell wins; 0 disables), then
    a seeded uniform downsample enforces the cap.

    Returns (points (M, 3), colors (M, 3)).
    """
    depths = np.asarray(depths, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    n_c = depths.shape[0]
    pts_parts = []
    col_parts = []
    for n in range(n_c):
        cam = rig.view(frame, n)
        m = masks[n] & np.isfinite(depths[n]) & (depths[n] > 0.0)
        if not m.any():
            continue
        vs, us = np.nonzero(m)
        px = np.stack([us, vs], axis=1).astype(np.float64)
        pts_parts.append(backproject(cam, px, depths[n][vs, us]))
        col_parts.append(colors[n][vs, us])
    if not pts_parts:
        raise EmptyFusionError(
            "no masked pixels to fuse; relax score_threshold/prob_threshold "
            "or check the depth streams"
        )
    pts = np.concatenate(pts_parts, axis=0)
    cols = np.concatenate(col_parts, axis=0)

    if voxel_size > 0.0:
        cells = np.floor(pts / voxel_size).astype(np.int64)
        _, first = np.unique(cells, axis=0, return_index=True)
        keep = np.sort(first)
        pts, cols = pts[keep], cols[keep]
    if pts.shape[0] > cap:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(pts.shape[0], size=cap, replace=False))
        pts, cols = pts[keep], cols[keep]
    return pts, cols


def structure_loss(
    d_ren: np.ndarray,
    d_mvs: np.ndarray,
    mask: np.ndarray,
    *,
    transition: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Masked smooth-L1 between rendered and estimated depth, with gradient.

    smoothL1(x) = 0.5 x^2 / transition for |x| < transition, else
    |x| - 0.5 transition; averaged over masked pixels.  Returns
    (loss, dL/dD_ren) with zero gradient outside the mask; an all-false
    mask yields (0, zeros).
    """
    d_ren = np.asarray(d_ren, dtype=np.float64)
    d_mvs = np.asarray(d_mvs, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if d_ren.shape != d_mvs.shape or d_ren.shape != m.shape:
        raise ValueError("depth and mask shapes disagree")
    count = int(m.sum())
    grad = np.zeros_like(d_ren)
    if count == 0:
        return 0.0, grad
    r = np.where(m, d_ren - d_mvs, 0.0)
    a = np.abs(r)
    quad = a < transition
    per_px = np.where(quad, 0.5 * r * r / transition, a - 0.5 * transition)
    loss = float(per_px[m].sum() / count)
    grad_px = np.where(quad, r / transition, np.sign(r))
    grad[m] = grad_px[m] / count
    return loss, grad
