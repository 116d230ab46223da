"""Report figures for CLI outputs.

Every function renders one PNG next to the delimited output it belongs to
and returns the path.  All figures use the Agg backend so the CLI works
headless; nothing here is interactive.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 130


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def training_curves(history: list[dict], path: str) -> str:
    """PSNR/SSIM and loss terms over iterations from the training log."""
    it = np.array([row["iter"] for row in history])
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 3.8))

    ax0.plot(it, [row["psnr"] for row in history], lw=1.0, label="psnr")
    ax0.set_xlabel("iteration")
    ax0.set_ylabel("psnr [dB]")
    twin = ax0.twinx()
    twin.plot(it, [row["ssim"] for row in history], lw=1.0, color="tab:orange",
              label="ssim")
    twin.set_ylabel("ssim")
    ax0.set_title("sampled-view quality")

    for key in ("l_photo", "l_rank", "l_patch", "l_struct", "l_total"):
        vals = np.array([row[key] for row in history], dtype=np.float64)
        if np.any(vals > 0):
            ax1.plot(it, vals, lw=1.0, label=key)
    ax1.set_yscale("log")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax1.set_title("loss terms")
    return _save(fig, path)


def ablation_chart(rows: list[dict], path: str) -> str:
    """Held-out PSNR per supervision configuration."""
    names = [r["name"] for r in rows]
    psnr = [r["psnr"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(rows) + 1.5))
    bars = ax.barh(names, psnr, color="tab:blue")
    ax.bar_label(bars, fmt="%.2f", fontsize=8, padding=2)
    ax.invert_yaxis()
    ax.set_xlabel("held-out psnr [dB]")
    lo = min(psnr)
    ax.set_xlim(max(0.0, lo - 2.0), max(psnr) + 1.5)
    ax.set_title("supervision ablation")
    return _save(fig, path)


def mask_coverage(scores: np.ndarray, masks: np.ndarray, path: str,
                  frame: int = 0) -> str:
    """Kept-pixel fraction per view plus score/mask maps for one frame.

    scores: (N_c, H, W) aggregated consistency scores.
    masks:  (N_f, N_c, H, W) boolean validity masks.
    """
    n_c = scores.shape[0]
    fig, axes = plt.subplots(2, n_c + 1, figsize=(2.4 * (n_c + 1), 4.6))

    kept = masks.mean(axis=(0, 2, 3))
    axes[0, 0].bar(np.arange(n_c), kept, color="tab:green")
    axes[0, 0].set_ylim(0, 1)
    axes[0, 0].set_xlabel("view")
    axes[0, 0].set_title("kept fraction", fontsize=9)
    axes[1, 0].axis("off")

    vmax = float(np.nanmax(scores)) if np.isfinite(scores).any() else 1.0
    for n in range(n_c):
        im = axes[0, n + 1].imshow(scores[n], vmin=0.0, vmax=vmax, cmap="viridis")
        axes[0, n + 1].set_title(f"score view {n}", fontsize=9)
        axes[1, n + 1].imshow(masks[frame, n], vmin=0, vmax=1, cmap="gray")
        axes[1, n + 1].set_title(f"mask t={frame}", fontsize=9)
        for ax in (axes[0, n + 1], axes[1, n + 1]):
            ax.set_xticks([])
            ax.set_yticks([])
    fig.colorbar(im, ax=axes[0, 1:].tolist(), shrink=0.8)
    fig.savefig(path, dpi=_DPI)  # colorbar layout dislikes tight_layout
    plt.close(fig)
    return path


def eval_chart(rows: list[dict], path: str) -> str:
    """Per-view PSNR and SSIM bars from an evaluation table."""
    per_view = [r for r in rows if r["view"] != "mean"]
    labels = [str(r["view"]) for r in per_view]
    x = np.arange(len(per_view))
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax0.bar(x, [r["psnr"] for r in per_view], color="tab:blue")
    ax0.set_xticks(x, labels)
    ax0.set_xlabel("view")
    ax0.set_ylabel("psnr [dB]")
    ax1.bar(x, [r["ssim"] for r in per_view], color="tab:orange")
    ax1.set_xticks(x, labels)
    ax1.set_xlabel("view")
    ax1.set_ylabel("ssim")
    ax1.set_ylim(0, 1)
    fig.suptitle("held-out metrics")
    return _save(fig, path)
