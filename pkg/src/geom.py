"""Rigid-body, covariance and spherical-harmonic math shared by every stage.

All functions take and return float64 torch tensors and broadcast over leading
batch dimensions. Quaternions are stored as ``(w, x, y, z)``.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import torch

from .errors import DegenerateCovarianceError


DTYPE = torch.float64

ArrayLike = Union[torch.Tensor, Sequence[float], float]

MAX_SH_DEGREE = 3
COND_LIMIT = 1e12

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def as_tensor(value: ArrayLike) -> torch.Tensor:
    """Convert a list, array or tensor to a float64 tensor (no copy if already one)."""
    if isinstance(value, torch.Tensor):
        return value if value.dtype == DTYPE else value.to(DTYPE)
    return torch.as_tensor(value, dtype=DTYPE)


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------

def identity_quat(*batch: int) -> torch.Tensor:
    """Identity rotation, optionally repeated over a batch shape."""
    q = torch.zeros(*batch, 4, dtype=DTYPE)
    q[..., 0] = 1.0
    return q


def normalize_quat(q: torch.Tensor) -> torch.Tensor:
    return q / torch.linalg.norm(q, dim=-1, keepdim=True)


def quat_conjugate(q: torch.Tensor) -> torch.Tensor:
    return q * torch.tensor([1.0, -1.0, -1.0, -1.0], dtype=q.dtype)


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product ``a ⊗ b``; ``R(a ⊗ b) = R(a) R(b)``."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        (
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ),
        dim=-1,
    )


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrix of a quaternion.

    The quaternion is normalized first, so gradients flow through the raw
    (un-normalized) components. ``q`` and ``-q`` give the same matrix.

    Args:
        q: Quaternions of shape (..., 4).

    Returns:
        Rotation matrices of shape (..., 3, 3).
    """
    w, x, y, z = normalize_quat(q).unbind(-1)
    return torch.stack(
        (
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ),
        dim=-1,
    ).reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R: torch.Tensor) -> torch.Tensor:
    """Quaternion (w >= 0) of a rotation matrix, using the largest-diagonal branch."""
    m00, m01, m02 = R[..., 0, 0], R[..., 0, 1], R[..., 0, 2]
    m10, m11, m12 = R[..., 1, 0], R[..., 1, 1], R[..., 1, 2]
    m20, m21, m22 = R[..., 2, 0], R[..., 2, 1], R[..., 2, 2]
    trace = m00 + m11 + m22

    def branch(diag: torch.Tensor) -> torch.Tensor:
        return 2.0 * torch.sqrt(torch.clamp(diag, min=1e-12))

    s_w = branch(1 + trace)
    s_x = branch(1 + m00 - m11 - m22)
    s_y = branch(1 + m11 - m00 - m22)
    s_z = branch(1 + m22 - m00 - m11)
    candidates = torch.stack(
        (
            torch.stack((s_w / 4, (m21 - m12) / s_w, (m02 - m20) / s_w, (m10 - m01) / s_w), -1),
            torch.stack(((m21 - m12) / s_x, s_x / 4, (m01 + m10) / s_x, (m02 + m20) / s_x), -1),
            torch.stack(((m02 - m20) / s_y, (m01 + m10) / s_y, s_y / 4, (m12 + m21) / s_y), -1),
            torch.stack(((m10 - m01) / s_z, (m02 + m20) / s_z, (m12 + m21) / s_z, s_z / 4), -1),
        ),
        dim=-2,
    )
    choice = torch.stack((trace, m00, m11, m22), -1).argmax(-1)
    q = torch.gather(candidates, -2, choice[..., None, None].expand(choice.shape + (1, 4)))
    q = normalize_quat(q.squeeze(-2))
    return torch.where(q[..., :1] < 0, -q, q)


def axis_angle_to_quat(v: torch.Tensor) -> torch.Tensor:
    """Quaternion for an axis-angle 3-vector; smooth (and differentiable) at zero."""
    theta2 = (v * v).sum(-1, keepdim=True)
    small = theta2 < 1e-8
    # keep sqrt away from 0 so the unused branch does not poison the gradient
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    half = 0.5 * theta
    w_big = torch.cos(half)
    k_big = torch.sin(half) / theta
    w_small = 1.0 - theta2 / 8.0 + theta2 * theta2 / 384.0
    k_small = 0.5 - theta2 / 48.0 + theta2 * theta2 / 3840.0
    w = torch.where(small, w_small, w_big)
    k = torch.where(small, k_small, k_big)
    return torch.cat((w, k * v), dim=-1)


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R(rotation) x + translation``."""

    rotation: torch.Tensor
    translation: torch.Tensor

    @classmethod
    def identity(cls) -> "Pose":
        return cls(identity_quat(), torch.zeros(3, dtype=DTYPE))

    @classmethod
    def from_matrix(cls, matrix: torch.Tensor) -> "Pose":
        matrix = as_tensor(matrix)
        return cls(rotmat_to_quat(matrix[..., :3, :3]), matrix[..., :3, 3].clone())

    def rotation_matrix(self) -> torch.Tensor:
        return quat_to_rotmat(self.rotation)

    def matrix(self) -> torch.Tensor:
        """Homogeneous 4x4 matrix."""
        batch = self.translation.shape[:-1]
        out = torch.zeros(batch + (4, 4), dtype=DTYPE)
        out[..., :3, :3] = self.rotation_matrix()
        out[..., :3, 3] = self.translation
        out[..., 3, 3] = 1.0
        return out

    def inverse(self) -> "Pose":
        inv_rot = quat_conjugate(normalize_quat(self.rotation))
        inv_t = -(quat_to_rotmat(inv_rot) @ self.translation[..., None])[..., 0]
        return Pose(inv_rot, inv_t)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        rotation = quat_multiply(normalize_quat(self.rotation), normalize_quat(other.rotation))
        translation = self.apply(other.translation)
        return Pose(rotation, translation)

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        """Transform points of shape (..., 3)."""
        return points @ self.rotation_matrix().transpose(-1, -2) + self.translation


def transform_to_world(
    pose: Pose,
    mu_o: torch.Tensor,
    q_o: torch.Tensor,
    literal: bool = False,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Map vehicle-frame Gaussians into the world frame.

    Positions follow ``μ_w = R_t μ_o + T_t``. Rotations compose as the rigid
    body ``R_w = R_t R_o``; ``literal=True`` instead evaluates the transposed
    variant ``R_w = R_o R_tᵀ``, which is not a consistent rigid transform and is
    kept only for comparison runs.

    Args:
        pose: Vehicle pose at the rendered frame.
        mu_o: Vehicle-frame means (..., 3).
        q_o: Vehicle-frame rotations (..., 4).
        literal: Use the transposed ``R_o R_tᵀ`` composition.

    Returns:
        Tuple of world means (..., 3) and world rotations (..., 4).
    """
    mu_w = pose.apply(mu_o)
    q_t = normalize_quat(pose.rotation)
    if literal:
        q_w = quat_multiply(normalize_quat(q_o), quat_conjugate(q_t))
    else:
        q_w = quat_multiply(q_t, normalize_quat(q_o))
    return mu_w, q_w


def apply_pose_delta(pose: Pose, delta_rotation: torch.Tensor, delta_translation: torch.Tensor) -> Pose:
    """Refined pose ``R' = R ΔR``, ``T' = T + ΔT``; ``delta_rotation`` is a quaternion."""
    rotation = quat_multiply(normalize_quat(pose.rotation), normalize_quat(delta_rotation))
    return Pose(rotation, pose.translation + delta_translation)


# ---------------------------------------------------------------------------
# Gaussians
# ---------------------------------------------------------------------------

def build_covariance(scale: torch.Tensor, q: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Covariance ``Σ = R S Sᵀ Rᵀ`` from per-axis scales and a rotation.

    Args:
        scale: Positive scales (..., 3). Models store log-scales and exponentiate
            before calling this.
        q: Rotations (..., 4).
        check: Reject non-positive scales.

    Returns:
        Symmetric positive-definite matrices (..., 3, 3).

    Raises:
        DegenerateCovarianceError: If any scale component is not positive.
    """
    if check and bool((scale <= 0).any()):
        raise DegenerateCovarianceError("scale components must be positive")
    M = quat_to_rotmat(q) * scale[..., None, :]
    cov = M @ M.transpose(-1, -2)
    return 0.5 * (cov + cov.transpose(-1, -2))


def eval_gaussian(x: torch.Tensor, mu: torch.Tensor, cov: torch.Tensor) -> torch.Tensor:
    """Unnormalized density ``exp(-½ dᵀ Σ⁻¹ d)`` with ``d = x - μ``.

    Raises:
        DegenerateCovarianceError: If the condition number of ``cov`` exceeds 1e12.
    """
    cond = torch.linalg.cond(cov)
    if bool((~torch.isfinite(cond) | (cond > COND_LIMIT)).any()):
        raise DegenerateCovarianceError(f"covariance condition number above {COND_LIMIT:g}")
    d = x - mu
    solved = torch.linalg.solve(cov, d[..., None])[..., 0]
    return torch.exp(-0.5 * (d * solved).sum(-1))


# ---------------------------------------------------------------------------
# Spherical harmonics
# ---------------------------------------------------------------------------

def sh_coeff_count(degree: int) -> int:
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_SH_DEGREE}], got {degree}")
    return (degree + 1) ** 2


def sh_basis(degree: int, dirs: torch.Tensor) -> torch.Tensor:
    """Real SH basis values for unit directions, shape (..., (degree+1)²)."""
    sh_coeff_count(degree)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    terms = [torch.full_like(x, SH_C0)]
    if degree > 0:
        terms += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        terms += [
            SH_C2[0] * xy,
            SH_C2[1] * yz,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * xz,
            SH_C2[4] * (xx - yy),
        ]
    if degree > 2:
        terms += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * xy * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return torch.stack(terms, dim=-1)


def eval_sh(sh: torch.Tensor, dirs: torch.Tensor, degree: Optional[int] = None) -> torch.Tensor:
    """Pre-activation RGB from SH coefficients.

    Args:
        sh: Coefficients (..., K, 3) with K = (ℓ_max+1)².
        dirs: Unit view directions (..., 3).
        degree: Evaluate only up to this degree (defaults to ℓ_max of ``sh``).

    Returns:
        RGB values (..., 3), linear in ``sh``.
    """
    if degree is None:
        degree = int(round(math.sqrt(sh.shape[-2]))) - 1
    basis = sh_basis(degree, dirs)
    count = basis.shape[-1]
    return (basis[..., :, None] * sh[..., :count, :]).sum(-2)


def sh_to_rgb(raw: torch.Tensor) -> torch.Tensor:
    """Colour activation: offset by 0.5 and clamp to [0, 1]."""
    return torch.clamp(raw + 0.5, 0.0, 1.0)


def rgb_to_sh_dc(rgb: torch.Tensor) -> torch.Tensor:
    """DC coefficient reproducing ``rgb`` under :func:`sh_to_rgb`."""
    return (rgb - 0.5) / SH_C0


def fourier_basis(k: int, t_norm: Union[float, torch.Tensor]) -> torch.Tensor:
    """Real trigonometric basis ``[1, cos 2πt, sin 2πt, cos 4πt, sin 4πt, ...]`` of length k."""
    if k < 1:
        raise ValueError(f"Fourier term count must be >= 1, got {k}")
    t = as_tensor(t_norm)
    terms = [torch.ones_like(t)]
    for j in range(1, k):
        harmonic = (j + 1) // 2
        angle = 2.0 * math.pi * harmonic * t
        terms.append(torch.cos(angle) if j % 2 == 1 else torch.sin(angle))
    return torch.stack(terms, dim=-1)


def fourier_sh_at_time(f: torch.Tensor, t_norm: Union[float, torch.Tensor]) -> torch.Tensor:
    """Recover SH coefficients at a normalized time from Fourier coefficients.

    Args:
        f: Fourier coefficients (..., k); typically (M, K, 3, k).
        t_norm: Normalized time, ``frame_index / frame_count``.

    Returns:
        SH coefficients with the trailing Fourier axis contracted, e.g. (M, K, 3).
    """
    return f @ fourier_basis(f.shape[-1], t_norm)
