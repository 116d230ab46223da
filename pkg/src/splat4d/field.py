"""The 4D Gaussian primitive set and its temporal slicing math.

Each primitive is an anisotropic Gaussian over (x, y, z, t) with covariance
``S = R diag(exp(2 * log_scales)) R^T`` where ``R`` is an SO(4) rotation built
from a pair of unit quaternions (left/right isoclinic factors).  Slicing at a
fixed time conditions the 4D Gaussian on t, which yields a 3D Gaussian with a
time-dependent mean, a Schur-complement covariance, and a scalar temporal
decay weight that multiplies opacity.

Color is low-order spherical harmonics per channel.  The DC band may drift
linearly in time: the stored slope is in color units per unit time, so at
degree 0 the pre-clamp color satisfies
``color(t2) - color(t1) = slope * (t2 - t1)``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, fields as dataclass_fields

import numpy as np

__all__ = [
    "GaussianField",
    "SliceBatch",
    "ParamGrads",
    "DegenerateTemporalExtentError",
    "CheckpointError",
    "isoclinic_rotations",
    "build_covariance",
    "slice_at_time",
    "slice_backward",
    "eval_color",
    "eval_color_backward",
    "save_checkpoint",
    "load_checkpoint",
]

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

# Temporal variances below this floor make the slice ill-conditioned.
TEMPORAL_VARIANCE_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"SPL4"
CHECKPOINT_VERSION = 1


class DegenerateTemporalExtentError(ValueError):
    """Raised when a primitive's temporal variance collapses below the floor."""


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files."""


@dataclass
class GaussianField:
    """Structure-of-arrays container for N primitives.

    Fields
    ------
    mean4:          (N, 4) centers (x, y, z, t)
    quat_l, quat_r: (N, 4) isoclinic quaternion pair; kept unit-norm by the
                    optimizer, normalized defensively inside the math
    log_scales:     (N, 4) log standard deviations per principal axis
    opacity_logit:  (N,)   pre-sigmoid opacity
    color_dc:       (N, 3) SH DC coefficients per channel
    color_time:     (N, 3) linear color drift per unit time (color units)
    color_sh1:      (N, 3, 3) optional degree-1 coefficients (basis, channel)
    """

    mean4: np.ndarray
    quat_l: np.ndarray
    quat_r: np.ndarray
    log_scales: np.ndarray
    opacity_logit: np.ndarray
    color_dc: np.ndarray
    color_time: np.ndarray
    color_sh1: np.ndarray | None = None

    def __post_init__(self):
        n = self.mean4.shape[0] if self.mean4.ndim == 2 else -1
        expected = {
            "mean4": (n, 4),
            "quat_l": (n, 4),
            "quat_r": (n, 4),
            "log_scales": (n, 4),
            "opacity_logit": (n,),
            "color_dc": (n, 3),
            "color_time": (n, 3),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
        if self.color_sh1 is not None and self.color_sh1.shape != (n, 3, 3):
            raise ValueError(
                f"color_sh1 must have shape {(n, 3, 3)}, got {self.color_sh1.shape}"
            )

    @property
    def num(self) -> int:
        return self.mean4.shape[0]

    @property
    def sh_degree(self) -> int:
        return 0 if self.color_sh1 is None else 1

    @property
    def dtype(self) -> np.dtype:
        return self.mean4.dtype

    def astype(self, dtype) -> "GaussianField":
        kw = {
            f.name: (None if getattr(self, f.name) is None
                     else np.ascontiguousarray(getattr(self, f.name), dtype=dtype))
            for f in dataclass_fields(self)
        }
        return GaussianField(**kw)

    def select(self, keep: np.ndarray) -> "GaussianField":
        """Return a field restricted to the primitives where ``keep`` is True."""
        kw = {
            f.name: (None if getattr(self, f.name) is None
                     else getattr(self, f.name)[keep])
            for f in dataclass_fields(self)
        }
        return GaussianField(**kw)

    def opacity(self) -> np.ndarray:
        return _sigmoid(self.opacity_logit)


@dataclass
class SliceBatch:
    """All primitives conditioned on one timestamp."""

    mean3: np.ndarray  # (N, 3)
    cov3: np.ndarray  # (N, 3, 3)
    decay: np.ndarray  # (N,) temporal weight F(t) in (0, 1]
    sigma: np.ndarray  # (N,) sigmoid opacity
    time: float


@dataclass
class ParamGrads:
    """Gradients with the same shapes as the corresponding field arrays."""

    mean4: np.ndarray
    quat_l: np.ndarray
    quat_r: np.ndarray
    log_scales: np.ndarray
    opacity_logit: np.ndarray
    color_dc: np.ndarray
    color_time: np.ndarray
    color_sh1: np.ndarray | None = None

    def __iadd__(self, other: "ParamGrads") -> "ParamGrads":
        for f in dataclass_fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if a is not None and b is not None:
                a += b
        return self

    @staticmethod
    def zeros_like(field: GaussianField) -> "ParamGrads":
        kw = {
            f.name: (None if getattr(field, f.name) is None
                     else np.zeros_like(getattr(field, f.name)))
            for f in dataclass_fields(field)
        }
        return ParamGrads(**kw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _quat_basis_left(dtype) -> np.ndarray:
    """Basis tensors B with L(q) = sum_k q_k B[k] (left isoclinic matrix)."""
    b = np.zeros((4, 4, 4), dtype=dtype)
    # (a, b, c, d) -> [[a,-b,-c,-d],[b,a,-d,c],[c,d,a,-b],[d,-c,b,a]]
    b[0] = np.eye(4)
    b[1] = [[0, -1, 0, 0], [1, 0, 0, 0], [0, 0, 0, -1], [0, 0, 1, 0]]
    b[2] = [[0, 0, -1, 0], [0, 0, 0, 1], [1, 0, 0, 0], [0, -1, 0, 0]]
    b[3] = [[0, 0, 0, -1], [0, 0, -1, 0], [0, 1, 0, 0], [1, 0, 0, 0]]
    return b


def _quat_basis_right(dtype) -> np.ndarray:
    """Basis tensors B with R(q) = sum_k q_k B[k] (right isoclinic matrix)."""
    b = np.zeros((4, 4, 4), dtype=dtype)
    # (p, q, r, s) -> [[p,-q,-r,-s],[q,p,s,-r],[r,-s,p,q],[s,r,-q,p]]
    b[0] = np.eye(4)
    b[1] = [[0, -1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, -1, 0]]
    b[2] = [[0, 0, -1, 0], [0, 0, 0, -1], [1, 0, 0, 0], [0, 1, 0, 0]]
    b[3] = [[0, 0, 0, -1], [0, 0, 1, 0], [0, -1, 0, 0], [1, 0, 0, 0]]
    return b


def _normalize_rows(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.sqrt(np.sum(q * q, axis=1))
    if np.any(norm < 1e-12):
        bad = int(np.argmin(norm))
        raise ValueError(f"gaussian {bad}: quaternion norm collapsed to {norm[bad]:.3e}")
    return q / norm[:, None], norm


def isoclinic_rotations(quat_l: np.ndarray, quat_r: np.ndarray) -> np.ndarray:
    """SO(4) rotations (N, 4, 4) from the quaternion pair (normalized inside)."""
    ql, _ = _normalize_rows(quat_l)
    qr, _ = _normalize_rows(quat_r)
    bl = _quat_basis_left(ql.dtype)
    br = _quat_basis_right(qr.dtype)
    left = np.einsum("nk,kij->nij", ql, bl)
    right = np.einsum("nk,kij->nij", qr, br)
    return np.einsum("nij,njk->nik", left, right)


def build_covariance(field: GaussianField) -> np.ndarray:
    """Full 4D covariances (N, 4, 4): R diag(exp(2 ls)) R^T."""
    rot = isoclinic_rotations(field.quat_l, field.quat_r)
    eig = np.exp(2.0 * field.log_scales)
    return np.einsum("nik,nk,njk->nij", rot, eig, rot)


def slice_at_time(field: GaussianField, t: float) -> SliceBatch:
    """Condition every primitive on timestamp ``t``.

    mean3 = mu_xyz + M (t - mu_t) / Z
    cov3  = A - M M^T / Z          (Schur complement of the time block)
    decay = exp(-(t - mu_t)^2 / (2 Z))
    """
    cov = build_covariance(field)
    a = cov[:, :3, :3]
    m = cov[:, :3, 3]
    z = cov[:, 3, 3]
    if np.any(z <= TEMPORAL_VARIANCE_FLOOR):
        bad = int(np.argmin(z))
        raise DegenerateTemporalExtentError(
            f"gaussian {bad}: temporal variance {z[bad]:.3e} at or below floor "
            f"{TEMPORAL_VARIANCE_FLOOR:g}; increase its temporal log-scale"
        )
    s = t - field.mean4[:, 3]
    mean3 = field.mean4[:, :3] + m * (s / z)[:, None]
    cov3 = a - np.einsum("ni,nj->nij", m, m) / z[:, None, None]
    decay = np.exp(-0.5 * s * s / z)
    return SliceBatch(
        mean3=mean3, cov3=cov3, decay=decay, sigma=_sigmoid(field.opacity_logit),
        time=float(t),
    )


def slice_backward(
    field: GaussianField,
    t: float,
    d_mean3: np.ndarray,
    d_cov3: np.ndarray,
    d_decay: np.ndarray,
    d_sigma: np.ndarray,
) -> ParamGrads:
    """Back-propagate slice-level gradients to the raw 4D parameters.

    Recomputes the forward intermediates; the primitive count is small
    relative to rasterization so this costs little.
    """
    dtype = field.dtype
    ql_hat, ql_norm = _normalize_rows(field.quat_l)
    qr_hat, qr_norm = _normalize_rows(field.quat_r)
    bl = _quat_basis_left(dtype)
    br = _quat_basis_right(dtype)
    left = np.einsum("nk,kij->nij", ql_hat, bl)
    right = np.einsum("nk,kij->nij", qr_hat, br)
    rot = np.einsum("nij,njk->nik", left, right)
    eig = np.exp(2.0 * field.log_scales)
    cov = np.einsum("nik,nk,njk->nij", rot, eig, rot)

    m = cov[:, :3, 3]
    z = cov[:, 3, 3]
    s = t - field.mean4[:, 3]
    decay = np.exp(-0.5 * s * s / z)

    # Gradients w.r.t. the block decomposition (A, M, Z) and the shift s.
    g_a = np.asarray(d_cov3, dtype=dtype)
    dm3 = np.asarray(d_mean3, dtype=dtype)
    dd = np.asarray(d_decay, dtype=dtype)

    g_sym = g_a + np.swapaxes(g_a, 1, 2)
    d_m = -np.einsum("nij,nj->ni", g_sym, m) / z[:, None]
    d_m += dm3 * (s / z)[:, None]
    dm3_dot_m = np.einsum("ni,ni->n", dm3, m)
    d_z = np.einsum("ni,nij,nj->n", m, g_a, m) / (z * z)
    d_z -= dm3_dot_m * s / (z * z)
    d_z += dd * decay * 0.5 * s * s / (z * z)
    d_s = dm3_dot_m / z - dd * decay * s / z

    # Assemble the 4x4 covariance gradient.
    g4 = np.zeros((field.num, 4, 4), dtype=dtype)
    g4[:, :3, :3] = g_a
    g4[:, :3, 3] = d_m
    g4[:, 3, 3] = d_z

    # cov = rot diag(eig) rot^T
    d_rot = np.einsum("nij,njk,nk->nik", g4 + np.swapaxes(g4, 1, 2), rot, eig)
    d_eig = np.einsum("nik,nij,njk->nk", rot, g4, rot)
    d_log_scales = d_eig * 2.0 * eig

    # rot = left right;  left/right are linear in the unit quaternions
    d_left = np.einsum("nij,nkj->nik", d_rot, right)
    d_right = np.einsum("nji,njk->nik", left, d_rot)
    d_ql_hat = np.einsum("kij,nij->nk", bl, d_left)
    d_qr_hat = np.einsum("kij,nij->nk", br, d_right)
    # through the normalization q_hat = q / |q|
    d_ql = (d_ql_hat - ql_hat * np.sum(d_ql_hat * ql_hat, axis=1, keepdims=True))
    d_ql /= ql_norm[:, None]
    d_qr = (d_qr_hat - qr_hat * np.sum(d_qr_hat * qr_hat, axis=1, keepdims=True))
    d_qr /= qr_norm[:, None]

    d_mean4 = np.zeros_like(field.mean4)
    d_mean4[:, :3] = dm3
    d_mean4[:, 3] = -d_s

    sig = _sigmoid(field.opacity_logit)
    d_logit = np.asarray(d_sigma, dtype=dtype) * sig * (1.0 - sig)

    return ParamGrads(
        mean4=d_mean4,
        quat_l=d_ql,
        quat_r=d_qr,
        log_scales=d_log_scales,
        opacity_logit=d_logit,
        color_dc=np.zeros_like(field.color_dc),
        color_time=np.zeros_like(field.color_time),
        color_sh1=None if field.color_sh1 is None else np.zeros_like(field.color_sh1),
    )


def eval_color(
    field: GaussianField, t: float, directions: np.ndarray | None = None
) -> np.ndarray:
    """Pre-clamp RGB (N, 3) at time ``t`` seen from unit ``directions``.

    The caller applies the final ``max(0, .)`` clamp; keeping the clamp out of
    this function lets the rasterizer track the clamp state for its backward
    pass.  ``directions`` is required for degree >= 1.
    """
    s = (t - field.mean4[:, 3])[:, None]
    color = 0.5 + SH_C0 * field.color_dc + field.color_time * s
    if field.color_sh1 is not None:
        if directions is None:
            raise ValueError("directions are required at SH degree 1")
        x, y, z = directions[:, 0:1], directions[:, 1:2], directions[:, 2:3]
        color = color + SH_C1 * (
            -y * field.color_sh1[:, 0] + z * field.color_sh1[:, 1]
            - x * field.color_sh1[:, 2]
        )
    return color


def eval_color_backward(
    field: GaussianField,
    t: float,
    directions: np.ndarray | None,
    d_color: np.ndarray,
) -> tuple[ParamGrads, np.ndarray | None]:
    """Gradients of :func:`eval_color` w.r.t. coefficients, mu_t and directions."""
    s = t - field.mean4[:, 3]
    d_dc = SH_C0 * d_color
    d_slope = d_color * s[:, None]
    d_mt = -np.sum(d_color * field.color_time, axis=1)

    d_sh1 = None
    d_dirs = None
    if field.color_sh1 is not None:
        if directions is None:
            raise ValueError("directions are required at SH degree 1")
        x = directions[:, 0:1]
        y = directions[:, 1:2]
        z = directions[:, 2:3]
        d_sh1 = np.stack(
            [
                -SH_C1 * y * d_color,
                SH_C1 * z * d_color,
                -SH_C1 * x * d_color,
            ],
            axis=1,
        )
        d_dirs = np.stack(
            [
                -SH_C1 * np.sum(d_color * field.color_sh1[:, 2], axis=1),
                -SH_C1 * np.sum(d_color * field.color_sh1[:, 0], axis=1),
                SH_C1 * np.sum(d_color * field.color_sh1[:, 1], axis=1),
            ],
            axis=1,
        )

    d_mean4 = np.zeros_like(field.mean4)
    d_mean4[:, 3] = d_mt
    grads = ParamGrads(
        mean4=d_mean4,
        quat_l=np.zeros_like(field.quat_l),
        quat_r=np.zeros_like(field.quat_r),
        log_scales=np.zeros_like(field.log_scales),
        opacity_logit=np.zeros_like(field.opacity_logit),
        color_dc=d_dc,
        color_time=d_slope,
        color_sh1=d_sh1,
    )
    return grads, d_dirs


# -- checkpoint i/o ----------------------------------------------------------
#
# Layout: header {magic "SPL4", version u32, count u32, sh_degree u32}, all
# little-endian, then contiguous little-endian float32 arrays in this order:
# mean4 (N,4), quat_l (N,4), quat_r (N,4), log_scales (N,4),
# opacity_logit (N,), color_dc (N,3), color_sh1 (N,3,3, only at degree 1),
# color_time (N,3).


def _checkpoint_fields(n: int, sh_degree: int) -> list[tuple[str, tuple]]:
    layout = [
        ("mean4", (n, 4)),
        ("quat_l", (n, 4)),
        ("quat_r", (n, 4)),
        ("log_scales", (n, 4)),
        ("opacity_logit", (n,)),
        ("color_dc", (n, 3)),
    ]
    if sh_degree >= 1:
        layout.append(("color_sh1", (n, 3, 3)))
    layout.append(("color_time", (n, 3)))
    return layout


def save_checkpoint(path: str, field: GaussianField) -> None:
    """Write the field to a binary checkpoint (atomic replace)."""
    n = field.num
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<III", CHECKPOINT_VERSION, n, field.sh_degree))
        for name, shape in _checkpoint_fields(n, field.sh_degree):
            arr = np.ascontiguousarray(getattr(field, name), dtype="<f4")
            if arr.shape != shape:
                raise CheckpointError(f"field {name} has shape {arr.shape}, want {shape}")
            f.write(arr.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> GaussianField:
    """Read a checkpoint written by :func:`save_checkpoint` (float32 arrays)."""
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) != 16 or head[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        version, n, sh_degree = struct.unpack("<III", head[4:])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        if sh_degree not in (0, 1):
            raise CheckpointError(f"{path}: unsupported sh_degree {sh_degree}")
        kw = {}
        for name, shape in _checkpoint_fields(n, sh_degree):
            count = int(np.prod(shape))
            raw = f.read(count * 4)
            if len(raw) != count * 4:
                raise CheckpointError(f"{path}: truncated while reading {name}")
            kw[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after payload")
    if sh_degree == 0:
        kw["color_sh1"] = None
    return GaussianField(**kw)
