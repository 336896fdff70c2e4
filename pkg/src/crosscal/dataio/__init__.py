"""Data ingestion, LiDAR-image rendering, and sample assembly."""

from .imaging import (
    DEPTH_SCALE,
    CameraImage,
    LidarImage,
    depth_overlay,
    preprocess_camera,
    render_lidar_image,
)
from .kitti import load_kitti_calib, load_kitti_cloud
from .samples import (
    CalibrationDataset,
    CalibrationSample,
    DatasetManifest,
    PreprocessSpec,
    RawFrame,
    derive_seed,
    make_sample,
    subsample_points,
)
from .synth import SynthSceneParams, synth_scene, write_synth_dataset

__all__ = [
    "DEPTH_SCALE",
    "CameraImage",
    "LidarImage",
    "depth_overlay",
    "preprocess_camera",
    "render_lidar_image",
    "load_kitti_calib",
    "load_kitti_cloud",
    "CalibrationDataset",
    "CalibrationSample",
    "DatasetManifest",
    "PreprocessSpec",
    "RawFrame",
    "derive_seed",
    "make_sample",
    "subsample_points",
    "SynthSceneParams",
    "synth_scene",
    "write_synth_dataset",
]
