"""Monocular-depth regularizers: global ranking and local patch losses.

Relative depth from a per-frame monocular estimator has no stable metric
scale, so absolute comparisons against rendered depth are meaningless.
Two complementary losses extract what IS reliable:

Global ranking: for randomly sampled pixel pairs, push the sigmoid-relaxed
ordering of the rendered depths toward the estimator's hard ordering.
Only the comparison D_mde(u) > D_mde(u') is read, so the loss is invariant
under strictly monotone rescalings of the estimate.

Local patches: tile the image into non-overlapping patches, normalize each
patch of both depth maps to zero mean and unit spread (population std plus
a small stabilizer), and penalize the squared difference.  Normalization
cancels the unknown per-frame affine scale while keeping local shape.

Both losses return analytic gradients w.r.t. the rendered depth map;
gradients through the patch mean and std are included.  Pixels without a
rendered surface (low accumulated alpha) are excluded via validity masks:
pairs never touch them, and patches containing any invalid pixel are
skipped whole so normalization statistics stay comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "KAPPA_DEFAULT",
    "DELTA_DEFAULT",
    "EPS_RANK_RANGE_FACTOR",
    "PixelPairBatch",
    "RankingConfig",
    "sample_pixel_pairs",
    "ranking_loss",
    "patch_normalize",
    "patch_loss",
    "dump_pairs_csv",
]

KAPPA_DEFAULT = 50.0
DELTA_DEFAULT = 2e-4  # normalization stabilizer
EPS_RANK_RANGE_FACTOR = 1e-4  # tie tolerance as a fraction of depth range
_RESAMPLE_ROUNDS = 12


@dataclass
class PixelPairBatch:
    """Sampled pixel pairs with the estimator's ordering at sampling time.

    a, b: (P, 2) integer (x, y) pixel coordinates, a != b per pair.
    rank: (P,) float, 1.0 where D_mde(a) > D_mde(b) else 0.0.  Ties were
    rejected during sampling, so the ordering is strict.
    """

    a: np.ndarray
    b: np.ndarray
    rank: np.ndarray
    frame: int = -1
    view: int = -1
    seed: int | None = None

    def __len__(self) -> int:
        return self.a.shape[0]


@dataclass
class RankingConfig:
    kappa: float = KAPPA_DEFAULT
    pairs_per_iter: int = 4096
    eps_rank: float | None = None  # None: EPS_RANK_RANGE_FACTOR * depth range

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.pairs_per_iter < 1:
            raise ValueError("pairs_per_iter must be >= 1")


def sample_pixel_pairs(
    rng: np.random.Generator,
    count: int,
    width: int,
    height: int,
    d_mde: np.ndarray,
    *,
    eps_rank: float | None = None,
    valid: np.ndarray | None = None,
    frame: int = -1,
    view: int = -1,
    seed: int | None = None,
) -> PixelPairBatch:
    """Draw pixel pairs uniformly, rejecting ties in the estimated depth.

    Pairs whose estimated depths differ by less than eps_rank (default:
    1e-4 of the valid depth range) carry no ordering signal and are
    resampled a bounded number of rounds, then dropped.  A constant map
    (or fewer than two valid pixels) yields an empty batch, which the
    losses treat as zero.  Deterministic given the generator state.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    d = np.asarray(d_mde, dtype=np.float64)
    if d.shape != (height, width):
        raise ValueError(f"d_mde shape {d.shape} != ({height}, {width})")
    ok = np.isfinite(d)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    flat = np.flatnonzero(ok.reshape(-1))
    empty = PixelPairBatch(
        np.empty((0, 2), np.int64), np.empty((0, 2), np.int64),
        np.empty(0), frame, view, seed,
    )
    if flat.size < 2:
        return empty
    vals = d.reshape(-1)[flat]
    if eps_rank is None:
        eps_rank = EPS_RANK_RANGE_FACTOR * float(vals.max() - vals.min())
    if vals.max() - vals.min() <= eps_rank:
        return empty

    kept_a: list[np.ndarray] = []
    kept_b: list[np.ndarray] = []
    need = count
    for _ in range(_RESAMPLE_ROUNDS):
        ia = rng.integers(0, flat.size, size=need)
        ib = rng.integers(0, flat.size, size=need)
        good = (ia != ib) & (np.abs(vals[ia] - vals[ib]) >= eps_rank)
        if good.any():
            kept_a.append(flat[ia[good]])
            kept_b.append(flat[ib[good]])
            need -= int(good.sum())
        if need == 0:
            break
    if not kept_a:
        return empty
    fa = np.concatenate(kept_a)
    fb = np.concatenate(kept_b)
    a = np.stack([fa % width, fa // width], axis=1)
    b = np.stack([fb % width, fb // width], axis=1)
    rank = (d.reshape(-1)[fa] > d.reshape(-1)[fb]).astype(np.float64)
    return PixelPairBatch(a, b, rank, frame, view, seed)


def _median_scale(d_ren: np.ndarray) -> float:
    """Median positive finite rendered depth; 1 when nothing qualifies."""
    vals = d_ren[np.isfinite(d_ren) & (d_ren > 0.0)]
    if vals.size == 0:
        return 1.0
    med = float(np.median(vals))
    return med if med > 0.0 else 1.0


def ranking_loss(
    d_ren: np.ndarray,
    d_mde: np.ndarray,
    batch: PixelPairBatch,
    *,
    kappa: float = KAPPA_DEFAULT,
    scale: float | None = None,
) -> tuple[float, np.ndarray]:
    """Sigmoid ranking loss over a pair batch, with dL/dD_ren.

    Per pair: R_ren = sigmoid(kappa * (D_ren(a) - D_ren(b)) / scale) and
    R_mde = [D_mde(a) > D_mde(b)]; the loss is mean |R_ren - R_mde|.
    The scale (default: median positive rendered depth) is treated as a
    constant: no gradient flows through it, keeping the loss a pure
    ordering penalty.  Only the comparison of the estimates is read, so
    any strictly monotone transform of d_mde leaves the value unchanged.
    """
    d_ren = np.asarray(d_ren, dtype=np.float64)
    d_mde = np.asarray(d_mde, dtype=np.float64)
    grad = np.zeros_like(d_ren)
    if len(batch) == 0:
        return 0.0, grad
    if scale is None:
        scale = _median_scale(d_ren)
    ax, ay = batch.a[:, 0], batch.a[:, 1]
    bx, by = batch.b[:, 0], batch.b[:, 1]
    r_mde = (d_mde[ay, ax] > d_mde[by, bx]).astype(np.float64)
    z = kappa * (d_ren[ay, ax] - d_ren[by, bx]) / scale
    r_ren = expit(z)
    per_pair = np.abs(r_ren - r_mde)
    loss = float(per_pair.mean())

    # d|R - R_mde|/dz = sign(R - R_mde) * R(1 - R); R_mde is 0 or 1, so the
    # sign is +1 when R_mde = 0 and -1 when R_mde = 1
    sign = np.where(r_mde > 0.5, -1.0, 1.0)
    dz = sign * r_ren * (1.0 - r_ren) * kappa / (scale * len(batch))
    np.add.at(grad, (ay, ax), dz)
    np.add.at(grad, (by, bx), -dz)
    return loss, grad


def patch_normalize(patch: np.ndarray, delta: float = DELTA_DEFAULT) -> np.ndarray:
    """Zero-mean, unit-spread normalization with a stabilized denominator.

    (D - mean) / (popstd + delta); a constant patch maps to zeros.
    """
    p = np.asarray(patch, dtype=np.float64)
    m = p.mean()
    s = p.std()
    return (p - m) / (s + delta)


def _patch_slices(h: int, w: int, size: int, stride: int):
    for y0 in range(0, h, stride):
        for x0 in range(0, w, stride):
            yield slice(y0, min(y0 + size, h)), slice(x0, min(x0 + size, w))


def patch_loss(
    d_ren: np.ndarray,
    d_mde: np.ndarray,
    patch_size: int,
    stride: int | None = None,
    *,
    delta: float = DELTA_DEFAULT,
    valid: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Mean squared difference of patch-normalized depths, with gradient.

    The image is tiled into axis-aligned patches of the given side (stride
    defaults to the side: non-overlapping; an image smaller than the patch
    yields a single clipped patch).  Each patch of both maps is normalized
    independently; the loss averages the per-patch mean squared residual.
    Gradients flow through the rendered patch's mean and std (a constant
    rendered patch contributes the subgradient 0 through its std).  A
    patch containing any invalid pixel is skipped entirely; if no patch
    survives, the loss is 0 with zero gradient.
    """
    if patch_size < 2:
        raise ValueError("patch_size must be >= 2")
    d_ren = np.asarray(d_ren, dtype=np.float64)
    d_mde = np.asarray(d_mde, dtype=np.float64)
    if d_ren.shape != d_mde.shape:
        raise ValueError("depth shapes disagree")
    if stride is None:
        stride = patch_size
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = d_ren.shape
    ok = np.isfinite(d_ren) & np.isfinite(d_mde)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)

    grad = np.zeros_like(d_ren)
    total = 0.0
    used = 0
    for sy, sx in _patch_slices(h, w, patch_size, stride):
        if not ok[sy, sx].all():
            continue
        x = d_ren[sy, sx]
        y = d_mde[sy, sx]
        n = x.size
        m = x.mean()
        s = x.std()
        xn = (x - m) / (s + delta)
        yn = patch_normalize(y, delta)
        r = xn - yn
        total += float((r * r).mean())
        used += 1

        g = 2.0 * r / n  # dL_patch / dxn
        gm = g.mean()
        gpatch = (g - gm) / (s + delta)
        if s > 0.0:
            gpatch = gpatch - float((g * xn).sum()) * (x - m) / ((s + delta) * n * s)
        grad[sy, sx] += gpatch
    if used == 0:
        return 0.0, grad
    grad /= used
    return total / used, grad


def dump_pairs_csv(batch: PixelPairBatch, path: str) -> None:
    """Write a pair batch as `u_x,u_y,v_x,v_y,rank` rows for debugging."""
    rows = np.concatenate(
        [batch.a, batch.b, batch.rank[:, None].astype(np.int64)], axis=1
    )
    np.savetxt(path, rows, fmt="%d", delimiter=",", header="u_x,u_y,v_x,v_y,rank", comments="")
