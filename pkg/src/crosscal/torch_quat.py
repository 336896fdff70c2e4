"""Differentiable batched quaternion operations (scalar-first layout)."""

from __future__ import annotations

import torch


def normalize_canonical(q: torch.Tensor) -> torch.Tensor:
    """Unit-normalize (..., 4) quaternions and force w >= 0."""
    q = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return torch.where(q[..., :1] < 0, -q, q)


def conjugate(q: torch.Tensor) -> torch.Tensor:
    return torch.cat([q[..., :1], -q[..., 1:]], dim=-1)


def multiply(q1: torch.Tensor, q2: torch.Tensor) -> torch.Tensor:
    """Hamilton product of (..., 4) quaternion tensors."""
    w1, x1, y1, z1 = q1.unbind(-1)
    w2, x2, y2, z2 = q2.unbind(-1)
    return torch.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        dim=-1,
    )


def rotation_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices (..., 3, 3) of unit quaternions (..., 4)."""
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], dim=-2)


def angular_distance(q1: torch.Tensor, q2: torch.Tensor) -> torch.Tensor:
    """Rotation angle in [0, pi] between unit quaternions, per batch element.

    2 * atan2(||Im r||, |Re r|) with r = q1 * q2^-1; the absolute real part
    makes it invariant to the sign of either input.
    """
    r = multiply(q1, conjugate(q2))
    im = r[..., 1:].norm(dim=-1)
    return 2.0 * torch.atan2(im, r[..., 0].abs())
