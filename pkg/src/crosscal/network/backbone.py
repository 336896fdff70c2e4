"""Dual-branch feature extraction: residual backbone + upsampling aggregation."""

from __future__ import annotations

import logging
import math

import torch
import torch.nn as nn

logger = logging.getLogger(__name__)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.down = None
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = self.down(x) if self.down is not None else x
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class Backbone(nn.Module):
    """18-layer residual trunk; returns the four stage maps (strides 4..32)."""

    def __init__(self, in_channels: int, width_mult: float = 1.0):
        super().__init__()
        widths = [max(4, int(round(c * width_mult))) for c in (64, 128, 256, 512)]
        self.stage_channels = widths
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.layer1 = self._stage(widths[0], widths[0], stride=1)
        self.layer2 = self._stage(widths[0], widths[1], stride=2)
        self.layer3 = self._stage(widths[1], widths[2], stride=2)
        self.layer4 = self._stage(widths[2], widths[3], stride=2)

    @staticmethod
    def _stage(in_ch, out_ch, stride):
        return nn.Sequential(BasicBlock(in_ch, out_ch, stride), BasicBlock(out_ch, out_ch))

    def forward(self, x):
        x = self.stem(x)
        c2 = self.layer1(x)
        c3 = self.layer2(c2)
        c4 = self.layer3(c3)
        c5 = self.layer4(c4)
        return [c2, c3, c4, c5]


class ConvNode(nn.Module):
    """3x3 conv + BN + ReLU fusion node, optionally deformable."""

    def __init__(self, channels: int, deformable: bool = False):
        super().__init__()
        self.deformable = False
        if deformable:
            try:
                from torchvision.ops import DeformConv2d

                self.offset = nn.Conv2d(channels, 18, 3, padding=1)
                nn.init.zeros_(self.offset.weight)
                nn.init.zeros_(self.offset.bias)
                self.conv = DeformConv2d(channels, channels, 3, padding=1, bias=False)
                self.deformable = True
            except Exception:  # pragma: no cover - depends on runtime build
                logger.warning("deformable convolution unavailable, using standard conv")
        if not self.deformable:
            self.conv = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        if self.deformable:
            out = self.conv(x, self.offset(x))
        else:
            out = self.conv(x)
        return self.relu(self.bn(out))


class AggregationUp(nn.Module):
    """Iterative top-down aggregation of backbone stages.

    The deepest used stage is upsampled x2 per step and fused with the
    lateral of the next shallower stage through a conv node; num_ups steps
    raise the resolution by 2**num_ups, so the output stride is
    32 / 2**num_ups.
    """

    def __init__(self, stage_channels: list[int], out_channels: int, num_ups: int, deformable: bool):
        super().__init__()
        used = stage_channels[-(num_ups + 1):]
        self.num_ups = num_ups
        self.laterals = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(ch, out_channels, 1, bias=False),
                nn.BatchNorm2d(out_channels),
                nn.ReLU(inplace=True),
            )
            for ch in used
        )
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(out_channels, out_channels, 4, stride=2, padding=1, bias=False)
            for _ in range(num_ups)
        )
        self.nodes = nn.ModuleList(ConvNode(out_channels, deformable) for _ in range(num_ups))

    def forward(self, stages):
        used = stages[-(self.num_ups + 1):]
        x = self.laterals[-1](used[-1])
        for i in reversed(range(self.num_ups)):
            x = self.nodes[i](self.laterals[i](used[i]) + self.ups[i](x))
        return x


class FeatureExtractor(nn.Module):
    """One branch: backbone + aggregation to the configured stride."""

    def __init__(self, in_channels: int, cfg):
        super().__init__()
        self.backbone = Backbone(in_channels, cfg.width_mult)
        num_ups = int(math.log2(cfg.upsample_rate))
        self.aggregate = AggregationUp(
            self.backbone.stage_channels,
            cfg.feature_dim,
            num_ups,
            cfg.deformable_upsampling,
        )

    def forward(self, x):
        return self.aggregate(self.backbone(x))


class QueryEncoder(nn.Module):
    """Camera-guided pose query: trunk + global average pool + projection."""

    def __init__(self, cfg):
        super().__init__()
        self.backbone = Backbone(3, cfg.width_mult)
        self.project = nn.Linear(self.backbone.stage_channels[-1], cfg.d_k)

    def from_features(self, final_stage: torch.Tensor) -> torch.Tensor:
        return self.project(final_stage.mean(dim=(2, 3)))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.from_features(self.backbone(image)[-1])


def load_backbone_weights(module: Backbone, path: str) -> int:
    """Best-effort load of a torchvision-style resnet18 state dict.

    Only tensors whose names map onto this trunk and whose shapes match are
    copied (width multipliers other than 1 skip almost everything).
    Returns the number of tensors loaded.
    """
    state = torch.load(path, map_location="cpu", weights_only=True)
    if "state_dict" in state:
        state = state["state_dict"]
    rename = {"conv1.weight": "stem.0.weight", "bn1.weight": "stem.1.weight",
              "bn1.bias": "stem.1.bias", "bn1.running_mean": "stem.1.running_mean",
              "bn1.running_var": "stem.1.running_var"}
    own = module.state_dict()
    loaded = {}
    for key, tensor in state.items():
        name = rename.get(key)
        if name is None:
            name = (
                key.replace("downsample", "down")
                if key.startswith("layer")
                else None
            )
        if name in own and own[name].shape == tensor.shape:
            loaded[name] = tensor
    own.update(loaded)
    module.load_state_dict(own)
    logger.info("loaded %d/%d backbone tensors from %s", len(loaded), len(own), path)
    return len(loaded)
