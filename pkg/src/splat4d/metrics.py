"""Image quality metrics: PSNR, SSIM (with analytic gradient), AVGE-2.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
K2 = 0.03, data range 1.0.  The SSIM map is averaged over the window-valid
interior (margin 5 px) so border padding never distorts the score; constant
images therefore score the exact luminance closed form and identical images
score exactly 1.  AVGE-2 is the geometric mean of the MSE and sqrt(1 - SSIM)
error components: sqrt(MSE * sqrt(1 - SSIM)).
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

__all__ = ["psnr", "ssim", "avge2", "PSNR_CAP"]

PSNR_CAP = 99.0

_WINDOW_SIZE = 11
_WINDOW_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03


def _window() -> np.ndarray:
    half = (_WINDOW_SIZE - 1) / 2.0
    x = np.arange(_WINDOW_SIZE) - half
    k = np.exp(-(x * x) / (2.0 * _WINDOW_SIGMA**2))
    return k / k.sum()


def _blur(img: np.ndarray) -> np.ndarray:
    """Separable windowed local mean with zero padding, per channel."""
    k = _window()
    out = correlate1d(img, k, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, k, axis=1, mode="constant", cval=0.0)


def _as_hwc(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected (H, W[, C]) image, got shape {arr.shape}")
    return arr


def psnr(image: np.ndarray, reference: np.ndarray, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in dB for unit data range, capped for MSE 0."""
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return cap
    return float(min(cap, -10.0 * np.log10(mse)))


def ssim(
    image: np.ndarray, reference: np.ndarray, with_grad: bool = False
):
    """Mean SSIM between two images; optionally also d(SSIM)/d(image)."""
    x = _as_hwc(image)
    y = _as_hwc(reference)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")

    c1 = _K1**2
    c2 = _K2**2
    m1 = _blur(x)
    m2 = _blur(y)
    e11 = _blur(x * x)
    e22 = _blur(y * y)
    e12 = _blur(x * y)

    a1 = 2.0 * m1 * m2 + c1
    a2 = 2.0 * (e12 - m1 * m2) + c2
    b1 = m1 * m1 + m2 * m2 + c1
    b2 = (e11 - m1 * m1) + (e22 - m2 * m2) + c2
    smap = (a1 * a2) / (b1 * b2)
    # Zero padding corrupts windows that overlap the border, so score only
    # pixels whose window lies fully inside (all pixels for tiny images).
    half = _WINDOW_SIZE // 2
    mh = half if x.shape[0] > 2 * half else 0
    mw = half if x.shape[1] > 2 * half else 0
    core = (slice(mh, x.shape[0] - mh), slice(mw, x.shape[1] - mw))
    value = float(smap[core].mean())
    if not with_grad:
        return value

    n = smap[core].size
    ds_da1 = a2 / (b1 * b2)
    ds_da2 = a1 / (b1 * b2)
    ds_db1 = -smap / b1
    ds_db2 = -smap / b2
    # chain through m1 = blur(x), e11 = blur(x^2), e12 = blur(x y)
    ds_dm1 = 2.0 * m2 * ds_da1 - 2.0 * m2 * ds_da2 + 2.0 * m1 * ds_db1 - 2.0 * m1 * ds_db2
    ds_de11 = ds_db2
    ds_de12 = 2.0 * ds_da2
    mask = np.zeros(smap.shape)
    mask[core] = 1.0
    ds_dm1 *= mask
    ds_de11 = ds_de11 * mask
    ds_de12 = ds_de12 * mask
    # the window is symmetric, so the adjoint of blur is blur itself
    grad = (_blur(ds_dm1) + 2.0 * x * _blur(ds_de11) + y * _blur(ds_de12)) / n
    if np.asarray(image).ndim == 2:
        grad = grad[:, :, 0]
    return value, grad


def avge2(image: np.ndarray, reference: np.ndarray) -> float:
    """Geometric mean of MSE and sqrt(1 - SSIM); zero for identical images."""
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    s = ssim(image, reference)
    dissim = np.sqrt(max(0.0, 1.0 - s))
    return float(np.sqrt(mse * dissim))
