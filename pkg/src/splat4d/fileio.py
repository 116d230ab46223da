"""File formats: PFM depth maps, PNG images, ASCII PLY point clouds.

PFM files are written little-endian ("Pf" header, negative scale) with rows
stored bottom-up, matching the common MVS tooling convention.  PNG color is
8-bit sRGB-gamma encoded; loading returns linear float arrays in [0, 1].
"""

from __future__ import annotations

import numpy as np
from PIL import Image

__all__ = [
    "read_pfm",
    "write_pfm",
    "read_png",
    "write_png",
    "write_mask_png",
    "read_mask_png",
    "write_ply",
    "read_ply",
]


def write_pfm(path: str, data: np.ndarray) -> None:
    """Write a single-channel float32 PFM file."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"PFM writer expects (H, W), got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale: little-endian
        f.write(arr[::-1].astype("<f4").tobytes())


def read_pfm(path: str) -> np.ndarray:
    """Read a single-channel PFM file into a float32 (H, W) array."""
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file (header {header!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ValueError(f"{path}: malformed PFM dimensions line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().rstrip())
        endian = "<" if scale < 0 else ">"
        count = w * h * channels
        raw = np.frombuffer(f.read(count * 4), dtype=endian + "f4")
        if raw.size != count:
            raise ValueError(f"{path}: truncated PFM payload")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.ascontiguousarray(raw.reshape(shape)[::-1]).astype(np.float32)


def _linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def _srgb_to_linear(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def write_png(path: str, image: np.ndarray) -> None:
    """Write a linear-light float image in [0, 1] as 8-bit gamma-encoded PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None].repeat(3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"PNG writer expects (H, W[, 3]), got shape {arr.shape}")
    if arr.shape[2] == 1:
        arr = arr.repeat(3, axis=2)
    enc = np.round(_linear_to_srgb(arr) * 255.0).astype(np.uint8)
    Image.fromarray(enc, mode="RGB").save(path)


def read_png(path: str) -> np.ndarray:
    """Read an 8-bit PNG into a linear-light float64 (H, W, 3) array."""
    img = Image.open(path).convert("RGB")
    enc = np.asarray(img, dtype=np.float64) / 255.0
    return _srgb_to_linear(enc)


def write_mask_png(path: str, mask: np.ndarray) -> None:
    """Write a boolean mask as an 8-bit grayscale PNG (255 = kept)."""
    arr = (np.asarray(mask, dtype=bool) * np.uint8(255))
    Image.fromarray(arr, mode="L").save(path)


def read_mask_png(path: str) -> np.ndarray:
    img = Image.open(path).convert("L")
    return np.asarray(img) >= 128


def write_ply(path: str, points: np.ndarray, colors: np.ndarray) -> None:
    """Write an ASCII PLY point cloud with xyz float and rgb uchar columns."""
    pts = np.asarray(points, dtype=np.float64)
    cols = np.asarray(colors, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    if cols.shape != pts.shape:
        raise ValueError("colors must match points shape")
    rgb = np.clip(np.round(cols * 255.0), 0, 255).astype(np.uint8)
    with open(path, "w") as f:
        f.write("ply\n")
        f.write("format ascii 1.0\n")
        f.write(f"element vertex {pts.shape[0]}\n")
        for axis in "xyz":
            f.write(f"property float {axis}\n")
        for ch in ("red", "green", "blue"):
            f.write(f"property uchar {ch}\n")
        f.write("end_header\n")
        for p, c in zip(pts, rgb):
            f.write(f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g} {c[0]} {c[1]} {c[2]}\n")


def read_ply(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Read back an ASCII PLY written by :func:`write_ply`."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n = None
        for line in f:
            line = line.strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line == "end_header":
                break
        if n is None:
            raise ValueError(f"{path}: missing vertex element")
        rows = [f.readline().split() for _ in range(n)]
    data = np.asarray(rows, dtype=np.float64)
    if data.shape != (n, 6):
        raise ValueError(f"{path}: expected {n} rows of x y z r g b")
    return data[:, :3], data[:, 3:] / 255.0
