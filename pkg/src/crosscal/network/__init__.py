"""Calibration network: dual-branch features, windowed correlation,
transformer regression."""

from .backbone import Backbone, FeatureExtractor, QueryEncoder
from .config import NetworkConfig, desk_scale, full_scale, tiny
from .correlation import WindowedCorrelation
from .model import CalibrationNet, PoseHeads, PosePrediction
from .transformer import CorrelationEncoder, PoseDecoder

__all__ = [
    "Backbone",
    "CalibrationNet",
    "CorrelationEncoder",
    "FeatureExtractor",
    "NetworkConfig",
    "PoseDecoder",
    "PoseHeads",
    "PosePrediction",
    "QueryEncoder",
    "WindowedCorrelation",
    "desk_scale",
    "full_scale",
    "tiny",
]
