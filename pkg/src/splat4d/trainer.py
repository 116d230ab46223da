"""Optimization loop for fitting a Gaussian field to a multi-view clip.

Each iteration renders one (frame, view) pair, combines a photometric term
with depth-based regularizers (structure against filtered metric depth,
ranking and patch statistics against per-frame relative depth), routes all
gradients through one backward pass of the rasterizer, and applies
adaptive-moment updates with per-group learning rates.  The loop is
sequential and deterministic given the seed; rendering may fan out over
tiles without changing results.

Also hosts the evaluation metrics table and the ablation harness that
trains the same scene under seven supervision configurations.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .cameras import CameraRig
from .consistency import (
    DepthStream,
    build_masks,
    dynamic_consistency,
    fuse_point_cloud,
    structure_loss,
)
from .depthreg import (
    DELTA_DEFAULT,
    KAPPA_DEFAULT,
    patch_loss,
    ranking_loss,
    sample_pixel_pairs,
)
from .field import GaussianField, ParamGrads, save_checkpoint
from .metrics import avge2, psnr, ssim
from .raster import RenderConfig, render_field, render_field_backward

__all__ = [
    "LossWeights",
    "TrainConfig",
    "LossReport",
    "TrainData",
    "TrainResult",
    "NonFiniteLossError",
    "photometric_loss",
    "total_loss",
    "init_field_random",
    "init_field_fused",
    "train",
    "evaluate",
    "ablate",
    "ABLATION_ROWS",
    "METRICS_HEADER",
]

METRICS_HEADER = "iter,psnr,ssim,l_photo,l_rank,l_patch,l_struct,l_total,num_gaussians"

_MIN_ALPHA_DEPTH = 0.5  # rendered depth counts as a surface above this
_MIN_KEEP = 8  # pruning never shrinks the field below this


class NonFiniteLossError(RuntimeError):
    """Raised when a loss term stops being finite; names the term."""


@dataclass(frozen=True)
class LossWeights:
    rank: float = 0.05
    patch: float = 0.02
    struct: float = 0.02

    def __post_init__(self):
        for name in ("rank", "patch", "struct"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class TrainConfig:
    iterations: int = 2000
    seed: int = 0
    # per-group learning rates; means decay exponentially to lr_means_final
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    dssim_weight: float = 0.2
    weights: LossWeights = dataclass_field(default_factory=LossWeights)
    # supervision plumbing
    use_fusion_init: bool = True
    use_consistency: bool = True
    pairs_per_iter: int = 1024
    patch_size: int = 16
    kappa: float = KAPPA_DEFAULT
    patch_delta: float = DELTA_DEFAULT
    struct_transition: float = 1.0
    # maintenance
    prune_every: int = 100
    prune_opacity: float = 0.005
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    # initialization
    init_cap: int = 100_000
    init_voxel: float = 0.1  # content blobs are ~0.1 wide; finer buys nothing
    random_init_count: int = 2000
    threads: int = 1

    def __post_init__(self):
        for name in ("lr_means", "lr_means_final", "lr_rotation", "lr_scales",
                     "lr_opacity", "lr_color"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dssim_weight <= 1.0:
            raise ValueError("dssim_weight must lie in [0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    def render_config(self) -> RenderConfig:
        return RenderConfig(threads=self.threads)


@dataclass
class LossReport:
    photometric: float
    ranking: float
    patch: float
    structure: float
    total: float
    grad_norms: dict

    def check(self, weights: LossWeights) -> None:
        expected = (self.photometric + weights.rank * self.ranking
                    + weights.patch * self.patch + weights.struct * self.structure)
        rel = abs(self.total - expected) / max(abs(expected), 1e-12)
        if rel > 1e-6:
            raise AssertionError(
                f"loss sum drifted: total {self.total} vs parts {expected}"
            )
        for name in ("photometric", "ranking", "patch", "structure"):
            if getattr(self, name) < 0:
                raise AssertionError(f"{name} loss went negative")


@dataclass
class TrainData:
    """Supervision for the training views of one clip."""

    rig: CameraRig
    rgb: np.ndarray  # (N_f, N_c, H, W, 3)
    depth_mvs: np.ndarray  # (N_f, N_c, H, W)
    prob: np.ndarray
    depth_mde: np.ndarray
    masks: np.ndarray | None = None  # consistency masks, same shape as depth
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        nf, nc = self.rig.num_frames, self.rig.num_views
        want = (nf, nc, self.rig.height, self.rig.width)
        if self.rgb.shape != want + (3,):
            raise ValueError(f"rgb must have shape {want + (3,)}, got {self.rgb.shape}")
        for name in ("depth_mvs", "prob", "depth_mde"):
            if getattr(self, name).shape != want:
                raise ValueError(f"{name} must have shape {want}")
        if self.masks is not None and self.masks.shape != want:
            raise ValueError(f"masks must have shape {want}")

    @staticmethod
    def from_scene(scene, config: "TrainConfig") -> "TrainData":
        """Training-view slice of a synthetic scene, with consistency masks
        computed up front when the config asks for them."""
        rig = scene.training_rig()
        b = scene.training_bundle()
        data = TrainData(rig, b.rgb, b.depth_mvs, b.prob, b.depth_mde,
                         background=tuple(scene.spec.background))
        if config.use_consistency:
            data.masks = compute_masks(data, threads=config.threads)
        return data


def compute_masks(data: TrainData, *, threads: int = 1) -> np.ndarray:
    stream = DepthStream(depth=data.depth_mvs, prob=data.prob, kind="mvs-metric")
    scores = dynamic_consistency(stream, data.rig, threads=threads)
    return build_masks(scores, stream).masks


def probability_masks(data: TrainData) -> np.ndarray:
    """Confidence-only fallback when consistency filtering is disabled."""
    with np.errstate(invalid="ignore"):
        return (np.isfinite(data.depth_mvs) & (data.depth_mvs > 0)
                & (data.prob >= 0.5))


# ---------------------------------------------------------------------------
# losses


def photometric_loss(rendered: np.ndarray, target: np.ndarray,
                     dssim_weight: float = 0.2) -> tuple[float, np.ndarray]:
    """(1-w) L1 + w (1 - SSIM)/2 with the gradient w.r.t. the render."""
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size * (1.0 - dssim_weight)
    loss = (1.0 - dssim_weight) * l1
    if dssim_weight > 0.0:
        s, ds = ssim(rendered, target, with_grad=True)
        loss += dssim_weight * (1.0 - s) / 2.0
        grad -= (dssim_weight / 2.0) * ds
    return loss, grad


def total_loss(
    field: GaussianField,
    data: TrainData,
    frame: int,
    view: int,
    *,
    config: TrainConfig,
    pair_rng: np.random.Generator,
) -> tuple[LossReport, ParamGrads, dict]:
    """Render one training view, assemble the objective, and backpropagate.

    Terms with zero weight are skipped outright, so ablations change not
    just the numbers but the computation graph.  Returns the report, the
    parameter gradients, and diagnostics (rendered image, sampled view).
    """
    cam = data.rig.view(frame, view)
    tau = data.rig.frame_time(frame)
    rcfg = dataclasses.replace(config.render_config(), background=data.background)
    out, ctx = render_field(field, tau, cam, rcfg, want_context=True)

    w = config.weights
    target = data.rgb[frame, view]
    l_photo, d_color = photometric_loss(out.color, target, config.dssim_weight)

    # normalized depth where enough opacity accumulated; the normalizer is
    # treated as constant so depth gradients route through the composite only
    alpha = out.alpha
    covered = alpha > _MIN_ALPHA_DEPTH
    d_ren = np.full_like(out.depth, np.nan)
    np.divide(out.depth, alpha, out=d_ren, where=covered)

    l_rank = l_patch = l_struct = 0.0
    d_depth = np.zeros_like(out.depth)
    mde = data.depth_mde[frame, view]
    valid_ren = covered & np.isfinite(d_ren)

    if w.rank > 0:
        valid = valid_ren & np.isfinite(mde)
        batch = sample_pixel_pairs(
            pair_rng, config.pairs_per_iter, cam.width, cam.height, mde,
            valid=valid, frame=frame, view=view,
        )
        l_rank, g = ranking_loss(d_ren, mde, batch, kappa=config.kappa)
        d_depth += w.rank * g
    if w.patch > 0:
        valid = valid_ren & np.isfinite(mde)
        l_patch, g = patch_loss(d_ren, mde, config.patch_size,
                                delta=config.patch_delta, valid=valid)
        d_depth += w.patch * g
    if w.struct > 0:
        mvs = data.depth_mvs[frame, view]
        keep = data.masks[frame, view] if data.masks is not None \
            else probability_masks(data)[frame, view]
        mask = keep & valid_ren & np.isfinite(mvs)
        l_struct, g = structure_loss(d_ren, mvs, mask,
                                     transition=config.struct_transition)
        d_depth += w.struct * g

    total = l_photo + w.rank * l_rank + w.patch * l_patch + w.struct * l_struct

    d_comp = np.zeros_like(d_depth)
    np.divide(d_depth, alpha, out=d_comp, where=covered)
    grads = render_field_backward(ctx, d_color, d_comp)

    report = LossReport(
        photometric=l_photo,
        ranking=l_rank,
        patch=l_patch,
        structure=l_struct,
        total=total,
        grad_norms={
            "color": float(np.linalg.norm(d_color)),
            "depth": float(np.linalg.norm(d_comp)),
            "means": float(np.linalg.norm(grads.mean4)),
        },
    )
    report.check(w)
    stats = {"render": out, "frame": frame, "view": view}
    return report, grads, stats


# ---------------------------------------------------------------------------
# initialization


def _scales_from_neighbors(points: np.ndarray, fallback: float) -> np.ndarray:
    from scipy.spatial import cKDTree

    if points.shape[0] < 2:
        return np.full(points.shape[0], fallback)
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=2)
    near = dist[:, 1]
    near[~np.isfinite(near) | (near <= 0)] = fallback
    return np.clip(near, 1e-4, 1.0)


def _assemble_field(points: np.ndarray, colors: np.ndarray,
                    spatial_scale: np.ndarray) -> GaussianField:
    n = points.shape[0]
    quat = np.zeros((n, 4))
    quat[:, 0] = 1.0
    log_scales = np.concatenate(
        [np.log(spatial_scale)[:, None].repeat(3, axis=1), np.zeros((n, 1))],
        axis=1,
    )
    # fused geometry describes frame 0; a unit temporal extent keeps the
    # slice weight above 0.6 across the whole normalized clip
    mean4 = np.concatenate([points, np.zeros((n, 1))], axis=1)
    eps = 1e-4
    col = np.clip(colors, eps, 1.0 - eps)
    return GaussianField(
        mean4=mean4,
        quat_l=quat.copy(),
        quat_r=quat.copy(),
        log_scales=log_scales,
        opacity_logit=np.full(n, np.log(0.1 / 0.9)),
        color_dc=col,
        color_time=np.zeros((n, 3)),
        color_sh1=np.zeros((n, 3, 3)),
    )


def init_field_fused(data: TrainData, config: TrainConfig,
                     masks: np.ndarray | None = None) -> GaussianField:
    """Back-project filtered frame-0 depths into the starting field."""
    if masks is None:
        masks = data.masks if data.masks is not None else probability_masks(data)
    points, colors = fuse_point_cloud(
        data.depth_mvs[0], data.rgb[0], masks[0], data.rig,
        frame=0, cap=config.init_cap, voxel_size=config.init_voxel,
        seed=config.seed,
    )
    scales = _scales_from_neighbors(points, fallback=config.init_voxel)
    return _assemble_field(points, colors, scales)


def init_field_random(data: TrainData, config: TrainConfig) -> GaussianField:
    """Depth-free fallback: uniform points in a box bracketing the cameras'
    working volume, gray colors.  The box spans the metric depth range of
    the supervision stream (two scalars, not per-pixel values)."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 17]))
    finite = data.depth_mvs[np.isfinite(data.depth_mvs)]
    if finite.size:
        z_lo, z_hi = 0.8 * float(finite.min()), 1.1 * float(finite.max())
    else:
        z_lo, z_hi = 0.5, 8.0
    n = config.random_init_count
    # scatter along rays of the first frame's cameras so points land in view
    views = data.rig.views_at_frame(0)
    cams = [views[i % len(views)] for i in range(n)]
    px = rng.uniform(0, data.rig.width - 1, n)
    py = rng.uniform(0, data.rig.height - 1, n)
    z = rng.uniform(z_lo, z_hi, n)
    points = np.empty((n, 3))
    for i, cam in enumerate(cams):
        ray = np.array([(px[i] - cam.cx) / cam.fx, (py[i] - cam.cy) / cam.fy, 1.0])
        points[i] = cam.center + cam.rotation.T @ (ray * z[i])
    spacing = np.full(n, max((z_hi - z_lo) / max(n ** (1 / 3), 1.0), 0.02))
    colors = np.full((n, 3), 0.5)
    return _assemble_field(points, colors, spacing)


# ---------------------------------------------------------------------------
# optimizer


class _Adam:
    def __init__(self, field: GaussianField, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {}
        self.v = {}
        for f in dataclasses.fields(field):
            arr = getattr(field, f.name)
            if arr is not None:
                self.m[f.name] = np.zeros_like(arr)
                self.v[f.name] = np.zeros_like(arr)

    def step(self, field: GaussianField, grads: ParamGrads, lrs: dict) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, lr in lrs.items():
            g = getattr(grads, name)
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            param = getattr(field, name)
            param -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def prune(self, keep: np.ndarray) -> None:
        for name in self.m:
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]


def _lr_table(config: TrainConfig, iteration: int) -> dict:
    frac = iteration / max(config.iterations - 1, 1)
    decay = (config.lr_means_final / config.lr_means) ** frac
    return {
        "mean4": config.lr_means * decay,
        "quat_l": config.lr_rotation,
        "quat_r": config.lr_rotation,
        "log_scales": config.lr_scales,
        "opacity_logit": config.lr_opacity,
        "color_dc": config.lr_color,
        "color_time": config.lr_color,
        "color_sh1": config.lr_color,
    }


def _renormalize_quats(field: GaussianField) -> None:
    for name in ("quat_l", "quat_r"):
        q = getattr(field, name)
        norm = np.linalg.norm(q, axis=1, keepdims=True)
        np.divide(q, norm, out=q, where=norm > 1e-12)
        q[norm[:, 0] <= 1e-12] = (1.0, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    field: GaussianField
    history: list  # one dict per iteration, METRICS_HEADER columns
    checkpoint_path: str | None = None
    metrics_path: str | None = None


def _atomic_checkpoint(path: str, field: GaussianField, config: TrainConfig) -> None:
    tmp = path + ".tmp"
    save_checkpoint(tmp, field)
    os.replace(tmp, path)
    snap = path.rsplit(".", 1)[0] + ".json"
    tmp = snap + ".tmp"
    payload = dataclasses.asdict(config)
    payload.pop("threads")  # execution detail; artifacts are thread-invariant
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, snap)


def _write_metrics(path: str, history: list) -> None:
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in history:
            fh.write(
                f"{row['iter']},{row['psnr']:.6f},{row['ssim']:.6f},"
                f"{row['l_photo']:.8e},{row['l_rank']:.8e},{row['l_patch']:.8e},"
                f"{row['l_struct']:.8e},{row['l_total']:.8e},{row['num_gaussians']}\n"
            )


def train(data: TrainData, config: TrainConfig,
          out_dir: str | None = None) -> TrainResult:
    """Fit a field to the training views; optionally write artifacts.

    With an output directory, emits metrics.csv, checkpoint.bin (plus the
    config snapshot), and periodic checkpoints at the configured cadence.
    Deterministic given config.seed, including across render thread counts.
    """
    rng = np.random.default_rng(config.seed)
    if config.use_fusion_init:
        masks = data.masks if config.use_consistency else probability_masks(data)
        field = init_field_fused(data, config, masks=masks)
    else:
        field = init_field_random(data, config)

    adam = _Adam(field)
    history = []
    nf, nc = data.rig.num_frames, data.rig.num_views

    for it in range(config.iterations):
        frame = int(rng.integers(nf))
        view = int(rng.integers(nc))
        report, grads, stats = total_loss(
            field, data, frame, view, config=config, pair_rng=rng,
        )
        for name, value in (("photometric", report.photometric),
                            ("ranking", report.ranking),
                            ("patch", report.patch),
                            ("structure", report.structure)):
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"{name} loss became non-finite ({value}) at iteration {it} "
                    f"on frame {frame}, view {view} with {field.num} primitives"
                )
        adam.step(field, grads, _lr_table(config, it))
        _renormalize_quats(field)

        out = stats["render"]
        target = data.rgb[frame, view]
        history.append({
            "iter": it,
            "psnr": psnr(out.color, target),
            "ssim": ssim(out.color, target),
            "l_photo": report.photometric,
            "l_rank": report.ranking,
            "l_patch": report.patch,
            "l_struct": report.structure,
            "l_total": report.total,
            "num_gaussians": field.num,
        })

        if config.prune_every and (it + 1) % config.prune_every == 0:
            keep = field.opacity() >= config.prune_opacity
            if keep.sum() >= _MIN_KEEP and not keep.all():
                field = field.select(keep)
                adam.prune(keep)

        if out_dir and config.checkpoint_every \
                and (it + 1) % config.checkpoint_every == 0:
            os.makedirs(out_dir, exist_ok=True)
            _atomic_checkpoint(
                os.path.join(out_dir, f"ckpt_{it + 1:06d}.bin"), field, config
            )

    result = TrainResult(field=field, history=history)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        result.checkpoint_path = os.path.join(out_dir, "checkpoint.bin")
        _atomic_checkpoint(result.checkpoint_path, field, config)
        result.metrics_path = os.path.join(out_dir, "metrics.csv")
        _write_metrics(result.metrics_path, history)
    return result


# ---------------------------------------------------------------------------
# evaluation


def evaluate(field: GaussianField, rig: CameraRig, rgb: np.ndarray,
             *, views: list[int] | None = None,
             config: RenderConfig | None = None) -> list[dict]:
    """Per-view metric rows (PSNR, SSIM, AVGE-2 averaged over frames) plus a
    final mean row."""
    if rgb.shape[2] != rig.height or rgb.shape[3] != rig.width:
        raise ValueError(
            f"image resolution {rgb.shape[2:4]} does not match rig "
            f"{(rig.height, rig.width)}"
        )
    config = config or RenderConfig()
    views = list(views) if views is not None else list(range(rig.num_views))
    rows = []
    for n in views:
        acc = {"psnr": 0.0, "ssim": 0.0, "avge2": 0.0}
        for t in range(rig.num_frames):
            cam = rig.view(t, n)
            out = render_field(field, rig.frame_time(t), cam, config)
            target = rgb[t, n]
            acc["psnr"] += psnr(out.color, target)
            acc["ssim"] += ssim(out.color, target)
            acc["avge2"] += avge2(out.color, target)
        rows.append({"view": n, **{k: v / rig.num_frames for k, v in acc.items()}})
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "avge2")}
    rows.append({"view": "mean", **mean})
    return rows


# ---------------------------------------------------------------------------
# ablation harness

ABLATION_ROWS = (
    "baseline",
    "fusion-init",
    "consistency-init",
    "full",
    "no-rank",
    "no-patch",
    "no-struct",
)


def _row_config(name: str, base: TrainConfig) -> TrainConfig:
    cfg = dataclasses.replace(base)
    w = base.weights
    if name == "baseline":
        cfg.use_fusion_init = False
        cfg.use_consistency = False
        cfg.weights = LossWeights(0.0, 0.0, 0.0)
    elif name == "fusion-init":
        cfg.use_consistency = False
        cfg.weights = LossWeights(0.0, 0.0, 0.0)
    elif name == "consistency-init":
        cfg.weights = LossWeights(0.0, 0.0, 0.0)
    elif name == "full":
        pass
    elif name == "no-rank":
        cfg.weights = LossWeights(0.0, w.patch, w.struct)
    elif name == "no-patch":
        cfg.weights = LossWeights(w.rank, 0.0, w.struct)
    elif name == "no-struct":
        cfg.weights = LossWeights(w.rank, w.patch, 0.0)
    else:
        raise ValueError(f"unknown ablation row {name!r}")
    return cfg


def _run_ablation_row(args):
    name, scene, config, holdout = args
    started = time.perf_counter()
    cfg = _row_config(name, config)
    data = TrainData.from_scene(scene, cfg)
    result = train(data, cfg)
    rows = evaluate(result.field, scene.rig, scene.bundle.rgb, views=holdout,
                    config=RenderConfig(threads=cfg.threads,
                                        background=tuple(scene.spec.background)))
    mean = rows[-1]
    return {
        "name": name,
        "psnr": mean["psnr"],
        "ssim": mean["ssim"],
        "avge2": mean["avge2"],
        "num_gaussians": result.field.num,
        "seconds": time.perf_counter() - started,
    }


def ablate(scene, config: TrainConfig, *, workers: int | None = None) -> list[dict]:
    """Train every supervision configuration on one scene with a shared
    seed and report held-out metrics, one row per configuration.

    Rows run in separate processes (each internally deterministic), so the
    table does not depend on the worker count.
    """
    holdout = list(scene.spec.holdout_views)
    if not holdout:
        raise ValueError("ablation needs at least one held-out view")
    jobs = [(name, scene, config, holdout) for name in ABLATION_ROWS]
    if workers is None:
        workers = min(len(ABLATION_ROWS), os.cpu_count() or 1)
    if workers <= 1:
        return [_run_ablation_row(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_ablation_row, jobs))
