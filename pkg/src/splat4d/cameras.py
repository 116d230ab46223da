"""Pinhole cameras, camera rigs, and image-space resampling.

Conventions used throughout the package:

* world-to-camera transform ``x_cam = R @ x_world + t``
* pixel coordinates are ``(u, v)`` with ``u`` the column axis and ``v`` the
  row axis; the center of the top-left pixel is ``(0, 0)``
* depth is the camera-frame z coordinate, positive in front of the camera
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CameraView",
    "CameraRig",
    "project",
    "backproject",
    "bilinear_sample",
    "load_rig",
    "save_rig",
]

ROTATION_TOL = 1e-10


@dataclass(frozen=True)
class CameraView:
    """A single pinhole view at one (frame, view) slot of a rig."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    view_index: int = 0
    frame_index: int = 0

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tr = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be (3, 3), got {rot.shape}")
        if tr.shape != (3,):
            raise ValueError(f"translation must be (3,), got {tr.shape}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > ROTATION_TOL:
            raise ValueError(f"rotation is not orthonormal (|R^T R - I| = {err:.3e})")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_json_dict(self) -> dict:
        return {
            "view": int(self.view_index),
            "frame": int(self.frame_index),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "R": [float(x) for x in self.rotation.reshape(-1)],
            "t": [float(x) for x in self.translation],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "CameraView":
        required = {"view", "frame", "fx", "fy", "cx", "cy", "width", "height", "R", "t"}
        missing = required - set(d)
        if missing:
            raise ValueError(f"camera entry missing keys: {sorted(missing)}")
        rot = np.asarray(d["R"], dtype=np.float64)
        if rot.size != 9:
            raise ValueError("camera key 'R' must hold 9 floats (row-major 3x3)")
        return CameraView(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            rotation=rot.reshape(3, 3),
            translation=np.asarray(d["t"], dtype=np.float64),
            view_index=int(d["view"]),
            frame_index=int(d["frame"]),
        )


class CameraRig:
    """A complete (frame, view) grid of cameras with shared resolution.

    Intrinsics and image size must be constant per view index across frames;
    camera poses may move freely frame to frame.
    """

    def __init__(self, views: list[CameraView]):
        if not views:
            raise ValueError("rig has no views")
        frames = sorted({v.frame_index for v in views})
        view_ids = sorted({v.view_index for v in views})
        if frames != list(range(len(frames))):
            raise ValueError(f"frame indices must be 0..N_f-1, got {frames}")
        if view_ids != list(range(len(view_ids))):
            raise ValueError(f"view indices must be 0..N_c-1, got {view_ids}")
        grid: dict[tuple[int, int], CameraView] = {}
        for v in views:
            key = (v.frame_index, v.view_index)
            if key in grid:
                raise ValueError(f"duplicate camera for frame={key[0]} view={key[1]}")
            grid[key] = v
        if len(grid) != len(frames) * len(view_ids):
            missing = [
                (t, n)
                for t in frames
                for n in view_ids
                if (t, n) not in grid
            ]
            raise ValueError(f"rig grid incomplete, missing (frame, view): {missing[:8]}")
        w, h = views[0].width, views[0].height
        for v in views:
            if (v.width, v.height) != (w, h):
                raise ValueError("all rig views must share one resolution")
        for n in view_ids:
            base = grid[(0, n)]
            for t in frames[1:]:
                cur = grid[(t, n)]
                same = (
                    cur.fx == base.fx
                    and cur.fy == base.fy
                    and cur.cx == base.cx
                    and cur.cy == base.cy
                )
                if not same:
                    raise ValueError(f"intrinsics of view {n} change at frame {t}")
        self._grid = grid
        self.num_frames = len(frames)
        self.num_views = len(view_ids)
        self.width = w
        self.height = h

    def view(self, frame: int, view: int) -> CameraView:
        try:
            return self._grid[(frame, view)]
        except KeyError:
            raise KeyError(f"no camera at frame={frame} view={view}") from None

    def views_at_frame(self, frame: int) -> list[CameraView]:
        return [self.view(frame, n) for n in range(self.num_views)]

    def all_views(self) -> list[CameraView]:
        return [self._grid[k] for k in sorted(self._grid)]

    def frame_time(self, frame: int) -> float:
        """Normalized timestamp of a frame index, mapped into [0, 1]."""
        if self.num_frames == 1:
            return 0.0
        return frame / (self.num_frames - 1)


def project(camera: CameraView, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project world points to pixels.

    Returns (pixels (N, 2), depths (N,)).  Depths may be <= 0; callers filter.
    Pixels for points at or behind the optical center are non-finite.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = pts @ camera.rotation.T + camera.translation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * cam[:, 0] / z + camera.cx
        v = camera.fy * cam[:, 1] / z + camera.cy
    return np.stack([u, v], axis=1), z


def backproject(camera: CameraView, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Lift pixels with known depth back to world points (N, 3)."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    d = np.asarray(depths, dtype=np.float64).reshape(-1)
    if px.shape[0] != d.shape[0]:
        raise ValueError("pixels and depths disagree in length")
    x = (px[:, 0] - camera.cx) / camera.fx * d
    y = (px[:, 1] - camera.cy) / camera.fy * d
    cam = np.stack([x, y, d], axis=1)
    return (cam - camera.translation) @ camera.rotation


def bilinear_sample(
    grid: np.ndarray,
    pixels: np.ndarray,
    tap_valid: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample ``grid`` (H, W) or (H, W, C) at continuous pixels.

    Parameters
    ----------
    grid:
        Source map.  Non-finite entries are sentinel (invalid) texels.
    pixels:
        (M, 2) array of (u, v) positions.  The valid domain is
        [0, W-1] x [0, H-1]; border positions use zero-weight clamped taps.
        Positions within a rounding tolerance (1e-9 px) of the boundary are
        clamped onto it, so round-trip projections that land epsilon
        outside do not flicker invalid.
    tap_valid:
        Optional (H, W) boolean map.  When given, invalid taps are dropped
        from the interpolation and the remaining weights renormalized; a
        sample is invalid only if every contributing tap is invalid.
        When omitted, any non-finite tap with nonzero weight invalidates
        the sample.

    Returns
    -------
    (values, valid):
        values has shape (M,) or (M, C) with NaN where invalid.
    """
    g = np.asarray(grid)
    squeeze = g.ndim == 2
    if squeeze:
        g = g[:, :, None]
    h, w, c = g.shape
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    u, v = px[:, 0], px[:, 1]

    tol = 1e-9
    inb = (u >= -tol) & (u <= w - 1.0 + tol) & (v >= -tol) & (v <= h - 1.0 + tol)
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    u0 = np.floor(uc).astype(np.int64)
    v0 = np.floor(vc).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = uc - u0
    fv = vc - v0

    tap_idx = [(v0, u0), (v0, u1), (v1, u0), (v1, u1)]
    weights = [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv]

    finite = np.isfinite(g).all(axis=2)
    if tap_valid is not None:
        finite = finite & np.asarray(tap_valid, dtype=bool)

    acc = np.zeros((px.shape[0], c))
    wacc = np.zeros(px.shape[0])
    bad = np.zeros(px.shape[0], dtype=bool)
    for (iv, iu), wt in zip(tap_idx, weights):
        ok = finite[iv, iu]
        if tap_valid is None:
            # strict mode: a non-finite tap poisons the sample unless its
            # weight is exactly zero
            bad |= (~ok) & (wt > 0.0)
        wt_eff = np.where(ok, wt, 0.0)
        tap = np.where(ok[:, None], g[iv, iu], 0.0)
        acc += tap * wt_eff[:, None]
        wacc += wt_eff

    valid = inb & ~bad & (wacc > 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = acc / wacc[:, None]
    out = np.where(valid[:, None], out, np.nan)
    if squeeze:
        out = out[:, 0]
    return out, valid


def save_rig(path: str, views: list[CameraView]) -> None:
    """Write a camera rig as a JSON array of view entries."""
    payload = [v.to_json_dict() for v in views]
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)
        f.write("\n")


def load_rig(path: str) -> CameraRig:
    """Load and validate a camera rig JSON file."""
    with open(path) as f:
        payload = json.load(f)
    if not isinstance(payload, list):
        raise ValueError("rig JSON must be an array of view entries")
    return CameraRig([CameraView.from_json_dict(d) for d in payload])
