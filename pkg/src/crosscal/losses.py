"""Training objective: weighted translation + rotation + point-distance terms.

All functions take torch tensors and are differentiable; batched inputs
reduce by mean over the batch. The object-level total_loss wraps the
tensor API for single samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import rotmat_to_quat
from .torch_quat import angular_distance, rotation_matrix

SMOOTH_L1_BETA = 1.0
# Heuristic defaults: translation and point terms are meters, rotation is
# radians; 0.1 on the point term keeps it from dominating at typical
# deviation magnitudes. Tunable via config.
DEFAULT_WEIGHTS = (1.0, 1.0, 0.1)
POINTCLOUD_CAP = 4096


@dataclass(frozen=True)
class LossWeights:
    lambda_t: float = DEFAULT_WEIGHTS[0]
    lambda_r: float = DEFAULT_WEIGHTS[1]
    lambda_p: float = DEFAULT_WEIGHTS[2]

    def __post_init__(self):
        if min(self.lambda_t, self.lambda_r, self.lambda_p) < 0:
            raise ValueError("loss weights must be nonnegative")
        if max(self.lambda_t, self.lambda_r, self.lambda_p) == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class LossBreakdown:
    """Per-term scalars; total is the weighted sum by construction."""

    total: torch.Tensor
    translation: torch.Tensor
    rotation: torch.Tensor
    pointcloud: torch.Tensor


def translation_loss(t_gt: torch.Tensor, t_pred: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 over the 3 components (summed), mean over batch."""
    per = F.smooth_l1_loss(t_pred, t_gt, reduction="none", beta=SMOOTH_L1_BETA)
    return per.sum(dim=-1).mean()


def rotation_loss(q_gt: torch.Tensor, q_pred: torch.Tensor) -> torch.Tensor:
    """Angular distance in radians, sign-flip invariant, mean over batch."""
    return angular_distance(q_gt, q_pred).mean()


def pointcloud_loss(
    q_gt: torch.Tensor,
    t_gt: torch.Tensor,
    q_pred: torch.Tensor,
    t_pred: torch.Tensor,
    points: torch.Tensor,
) -> torch.Tensor:
    """Mean displacement of points under T_gt^-1 * T_pred, mean over batch.

    points is (..., P, 3) in the same frame the transforms act on.
    """
    if points.shape[-2] == 0:
        raise ValueError("point cloud is empty")
    r_gt = rotation_matrix(q_gt)
    r_pred = rotation_matrix(q_pred)
    r_rel = r_gt.transpose(-1, -2) @ r_pred
    t_rel = (r_gt.transpose(-1, -2) @ (t_pred - t_gt).unsqueeze(-1)).squeeze(-1)
    moved = points @ r_rel.transpose(-1, -2) + t_rel.unsqueeze(-2)
    return (moved - points).norm(dim=-1).mean(dim=-1).mean()


def total_loss_terms(
    q_gt: torch.Tensor,
    t_gt: torch.Tensor,
    q_pred: torch.Tensor,
    t_pred: torch.Tensor,
    points: torch.Tensor,
    weights: LossWeights,
) -> LossBreakdown:
    """Tensor-level objective used by the training loop."""
    lt = translation_loss(t_gt, t_pred)
    lr = rotation_loss(q_gt, q_pred)
    lp = pointcloud_loss(q_gt, t_gt, q_pred, t_pred, points)
    total = weights.lambda_t * lt + weights.lambda_r * lr + weights.lambda_p * lp
    return LossBreakdown(total=total, translation=lt, rotation=lr, pointcloud=lp)


def total_loss(pred, sample, weights: LossWeights, subsample_seed: int = 0) -> LossBreakdown:
    """Objective for one (PosePrediction, CalibrationSample) pair.

    Clouds above POINTCLOUD_CAP points are subsampled with the given seed.
    """
    q_gt = torch.from_numpy(rotmat_to_quat(sample.t_gt.rotation).as_array())
    t_gt = torch.from_numpy(sample.t_gt.translation)
    q_pred = torch.as_tensor(pred.rotation.as_array(), dtype=torch.float64)
    t_pred = torch.as_tensor(np.asarray(pred.translation, dtype=np.float64))
    pts = sample.cloud.points
    if len(pts) > POINTCLOUD_CAP:
        rng = np.random.default_rng(subsample_seed)
        pts = pts[rng.choice(len(pts), POINTCLOUD_CAP, replace=False)]
    return total_loss_terms(q_gt, t_gt, q_pred, t_pred, torch.from_numpy(pts), weights)
