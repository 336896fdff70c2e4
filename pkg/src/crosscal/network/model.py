"""Full calibration network: features -> correlation -> regression heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..geometry import Quaternion
from ..torch_quat import normalize_canonical
from .backbone import FeatureExtractor, QueryEncoder, load_backbone_weights
from .config import NetworkConfig
from .correlation import WindowedCorrelation
from .transformer import CorrelationEncoder, PoseDecoder

# fixed spatial pool for the no-transformer head, so its parameter count
# does not depend on the input resolution
FC_POOL_HW = (4, 8)


@dataclass
class PosePrediction:
    """Regressed deviation: translation (meters) + canonical unit quaternion."""

    translation: np.ndarray
    rotation: Quaternion


class PoseHeads(nn.Module):
    """Two feed-forward heads: 3-vector translation and normalized quaternion."""

    def __init__(self, d_k: int, hidden: int):
        super().__init__()
        self.t_head = nn.Sequential(nn.Linear(d_k, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, 3))
        self.r_head = nn.Sequential(nn.Linear(d_k, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, 4))
        # start near (zero translation, identity rotation) without killing
        # gradient flow through the head inputs
        for head in (self.t_head, self.r_head):
            nn.init.uniform_(head[-1].weight, -0.01, 0.01)
            nn.init.zeros_(head[-1].bias)
        with torch.no_grad():
            self.r_head[-1].bias[0] = 1.0

    def forward(self, feat: torch.Tensor):
        t = self.t_head(feat)
        q = normalize_canonical(self.r_head(feat))
        return t, q


class CalibrationNet(nn.Module):
    """Dual-branch correlation-transformer pose regressor.

    forward takes batched tensors (camera (B, 3, H, W), lidar (B, 2, H, W))
    and returns (translation (B, 3), quaternion (B, 4)). The quaternion is
    unit-norm with a nonnegative scalar part.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.cam_branch = FeatureExtractor(3, cfg)
        self.lidar_branch = FeatureExtractor(2, cfg)
        self.correlation = WindowedCorrelation(
            cfg.feature_dim, cfg.d_k, cfg.num_heads, cfg.window_radius, cfg.use_multihead
        )
        if cfg.use_transformer:
            self.encoder = CorrelationEncoder(self.correlation.out_channels, cfg)
            self.query_encoder = QueryEncoder(cfg)
            self.decoder = PoseDecoder(cfg)
        else:
            pooled = self.correlation.out_channels * FC_POOL_HW[0] * FC_POOL_HW[1]
            self.fc = nn.Sequential(
                nn.Linear(pooled, cfg.d_k), nn.ReLU(inplace=True), nn.Linear(cfg.d_k, cfg.d_k)
            )
        self.heads = PoseHeads(cfg.d_k, cfg.head_hidden)
        if cfg.pretrained_backbone:
            for branch in (self.cam_branch, self.lidar_branch):
                load_backbone_weights(branch.backbone, cfg.pretrained_backbone)
            if cfg.use_transformer:
                load_backbone_weights(self.query_encoder.backbone, cfg.pretrained_backbone)

    def set_record_attention(self, flag: bool) -> None:
        for module in self.modules():
            if hasattr(module, "record_attention"):
                module.record_attention = flag

    def extract_features(self, cam: torch.Tensor, lidar: torch.Tensor):
        return self.cam_branch(cam), self.lidar_branch(lidar)

    def forward(self, cam: torch.Tensor, lidar: torch.Tensor):
        f_cam, f_lidar = self.extract_features(cam, lidar)
        if self.cfg.swap_correlation:
            corr = self.correlation(f_cam, f_lidar)
        else:
            corr = self.correlation(f_lidar, f_cam)
        if self.cfg.use_transformer:
            memory, _ = self.encoder(corr)
            query = self.query_encoder(cam).unsqueeze(1)
            feat = self.decoder(query, memory)
        else:
            pooled = F.adaptive_avg_pool2d(corr, FC_POOL_HW).flatten(1)
            feat = self.fc(pooled)
        return self.heads(feat)

    @torch.no_grad()
    def predict(self, sample) -> PosePrediction:
        """Single-sample inference in eval mode."""
        was_training = self.training
        self.eval()
        try:
            dtype = next(self.parameters()).dtype
            cam = torch.from_numpy(sample.camera.data).to(dtype).unsqueeze(0)
            lidar = torch.from_numpy(sample.lidar.channels()).to(dtype).unsqueeze(0)
            t, q = self(cam, lidar)
        finally:
            self.train(was_training)
        return PosePrediction(
            translation=t[0].double().numpy(),
            rotation=Quaternion.from_array(q[0].double().numpy()).canonicalize(),
        )
