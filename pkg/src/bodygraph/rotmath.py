"""Rotation representations, conversions and distances.

Conventions used throughout the package:

* axis-angle: ``(..., 3)`` tensor, direction = rotation axis, magnitude =
  angle in radians (canonical magnitude range ``[0, pi]``),
* rotation matrix: ``(..., 3, 3)`` tensor, orthonormal with det +1,
* 6-D representation: ``(..., 6)`` tensor, concatenation of the first and
  second rows of a rotation matrix.

Everything runs in double precision on torch tensors so the conversions can
sit inside differentiable pipelines; plain nested lists / numpy arrays are
accepted and converted.
"""

from __future__ import annotations

import math

import torch

# Below this angle (radians) the sin/cos ratios of the Rodrigues formula are
# evaluated with their 4th-order series to avoid 0/0.
SMALL_ANGLE = 1e-7

# Matrices whose angle is within this margin of pi have a numerically
# ill-conditioned axis; an arbitrary valid axis is returned there.
NEAR_PI = 1e-6

_ORTHO_TOL = 1e-9


def _as_f64(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.dtype.is_floating_point:
        t = t.to(torch.float64)
    return t.to(torch.float64)


def check_rot_matrix(r, tol: float = _ORTHO_TOL) -> torch.Tensor:
    """Validate that ``r`` is a proper rotation matrix (batched).

    Raises ``ValueError`` when ``r`` has the wrong shape, is not orthonormal
    within ``tol``, or has determinant differing from +1 by more than ``tol``.
    Returns the validated float64 tensor.
    """
    r = _as_f64(r)
    if r.shape[-2:] != (3, 3):
        raise ValueError(f"rotation matrix must have shape (..., 3, 3), got {tuple(r.shape)}")
    if not torch.isfinite(r).all():
        raise ValueError("rotation matrix contains non-finite values")
    eye = torch.eye(3, dtype=torch.float64)
    ortho_err = (r.transpose(-1, -2) @ r - eye).abs().max()
    if ortho_err > tol:
        raise ValueError(f"matrix is not orthonormal (max |R^T R - I| = {ortho_err:.3e})")
    det_err = (torch.linalg.det(r) - 1.0).abs().max()
    if det_err > tol:
        raise ValueError(f"matrix determinant differs from +1 by {det_err:.3e}")
    return r


def _hat(v: torch.Tensor) -> torch.Tensor:
    """Skew-symmetric matrix of a (..., 3) vector."""
    zero = torch.zeros_like(v[..., 0])
    rows = [
        torch.stack([zero, -v[..., 2], v[..., 1]], dim=-1),
        torch.stack([v[..., 2], zero, -v[..., 0]], dim=-1),
        torch.stack([-v[..., 1], v[..., 0], zero], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def _rodrigues(a: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula without input validation; differentiable everywhere.

    Works on the squared angle so there is no sqrt singularity at zero; the
    sin/cos ratios switch to series below SMALL_ANGLE.
    """
    t = (a * a).sum(dim=-1)  # theta^2
    small = t < SMALL_ANGLE * SMALL_ANGLE
    # Keep the exact branch finite where it is not used, so its (discarded)
    # gradients cannot poison the series branch through torch.where.
    t_safe = torch.where(small, torch.ones_like(t), t)
    theta = torch.sqrt(t_safe)
    sin_ratio = torch.where(small, 1.0 - t / 6.0 + t * t / 120.0, torch.sin(theta) / theta)
    cos_ratio = torch.where(small, 0.5 - t / 24.0 + t * t / 720.0, (1.0 - torch.cos(theta)) / t_safe)
    k = _hat(a)
    eye = torch.eye(3, dtype=a.dtype).expand(k.shape)
    return eye + sin_ratio[..., None, None] * k + cos_ratio[..., None, None] * (k @ k)


def axis_angle_to_matrix(a) -> torch.Tensor:
    """Convert axis-angle vectors ``(..., 3)`` to rotation matrices ``(..., 3, 3)``."""
    a = _as_f64(a)
    if a.shape[-1] != 3:
        raise ValueError(f"axis-angle must have shape (..., 3), got {tuple(a.shape)}")
    if not torch.isfinite(a).all():
        raise ValueError("axis-angle contains non-finite values")
    return _rodrigues(a)


def matrix_to_axis_angle(r, validate: bool = True) -> torch.Tensor:
    """Log map: rotation matrices ``(..., 3, 3)`` to axis-angle ``(..., 3)``.

    The returned magnitude lies in ``[0, pi]``. For angles within NEAR_PI of
    pi the axis sign is arbitrary (the two antipodal axes are equivalent).
    """
    r = check_rot_matrix(r) if validate else _as_f64(r)
    cos = ((r[..., 0, 0] + r[..., 1, 1] + r[..., 2, 2]) - 1.0) / 2.0
    theta = torch.arccos(cos.clamp(-1.0, 1.0))
    vee = torch.stack(
        [
            r[..., 2, 1] - r[..., 1, 2],
            r[..., 0, 2] - r[..., 2, 0],
            r[..., 1, 0] - r[..., 0, 1],
        ],
        dim=-1,
    )
    small = theta < SMALL_ANGLE
    near_pi = theta > math.pi - NEAR_PI
    mid = ~(small | near_pi)

    sin = torch.sin(theta)
    scale = torch.where(mid, theta / torch.where(mid, 2.0 * sin, torch.ones_like(sin)), torch.full_like(sin, 0.5))
    out = vee * scale[..., None]

    if near_pi.any():
        # Axis from the dominant column of R + I; well conditioned near pi.
        b = r + torch.eye(3, dtype=r.dtype)
        col_norm = torch.linalg.norm(b, dim=-2)
        k = col_norm.argmax(dim=-1)
        axis = torch.take_along_dim(b, k[..., None, None].expand(*k.shape, 3, 1), dim=-1)[..., 0]
        axis = axis / torch.linalg.norm(axis, dim=-1, keepdim=True)
        out = torch.where(near_pi[..., None], axis * theta[..., None], out)
    return out


def matrix_to_sixd(r, validate: bool = True) -> torch.Tensor:
    """First and second rows of a rotation matrix, concatenated to ``(..., 6)``."""
    r = check_rot_matrix(r) if validate else _as_f64(r)
    return torch.cat([r[..., 0, :], r[..., 1, :]], dim=-1)


def angular_velocity_sixd(r_prev, r_cur, validate: bool = True) -> torch.Tensor:
    """6-D encoding of the per-step rotation ``R_prev^T R_cur``."""
    if validate:
        r_prev = check_rot_matrix(r_prev)
        r_cur = check_rot_matrix(r_cur)
    else:
        r_prev, r_cur = _as_f64(r_prev), _as_f64(r_cur)
    return matrix_to_sixd(r_prev.transpose(-1, -2) @ r_cur, validate=False)


def geodesic_deg(r1, r2, validate: bool = True) -> torch.Tensor:
    """Geodesic rotation distance in degrees, batched.

    Bitwise-equal inputs return exactly 0.0: the trace formula would
    otherwise turn row-norm rounding into a spurious ~1e-6 degree error.
    """
    if validate:
        r1 = check_rot_matrix(r1)
        r2 = check_rot_matrix(r2)
    else:
        r1, r2 = _as_f64(r1), _as_f64(r2)
    m = r1.transpose(-1, -2) @ r2
    cos = ((m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2]) - 1.0) / 2.0
    deg = torch.arccos(cos.clamp(-1.0, 1.0)) * (180.0 / math.pi)
    equal = (r1 == r2).all(dim=-1).all(dim=-1)
    return torch.where(equal, torch.zeros_like(deg), deg)


def rot_x(angle: float) -> torch.Tensor:
    """Rotation matrix about the x axis."""
    return _rodrigues(torch.tensor([float(angle), 0.0, 0.0], dtype=torch.float64))


def rot_y(angle: float) -> torch.Tensor:
    """Rotation matrix about the y axis."""
    return _rodrigues(torch.tensor([0.0, float(angle), 0.0], dtype=torch.float64))


def rot_z(angle: float) -> torch.Tensor:
    """Rotation matrix about the z axis."""
    return _rodrigues(torch.tensor([0.0, 0.0, float(angle)], dtype=torch.float64))
