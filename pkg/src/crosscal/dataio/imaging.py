"""Camera preprocessing and two-channel LiDAR image rendering."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from ..geometry import CameraIntrinsics, PointCloud, SE3Transform, project_points

# Depth-channel normalization: meters mapped to [0, 1]. 80 m covers the
# sensor range of the road datasets this targets; synthetic desk scenes
# stay well inside it.
DEPTH_SCALE = 80.0


@dataclass
class CameraImage:
    """RGB image, channels-first (3, H, W), values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) image, got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class LidarImage:
    """Projected point cloud raster: normalized depth + intensity channels.

    mask is True where at least one point landed; depth/intensity are 0
    elsewhere.
    """

    depth: np.ndarray
    intensity: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if not (self.depth.shape == self.intensity.shape == self.mask.shape):
            raise ValueError("channel shapes differ")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def channels(self) -> np.ndarray:
        """Stack to the (2, H, W) float32 network input."""
        return np.stack([self.depth, self.intensity]).astype(np.float32)


def preprocess_camera(
    raw: np.ndarray,
    target_wh: tuple[int, int],
    padded_wh: tuple[int, int],
    intrinsics: CameraIntrinsics,
) -> tuple[CameraImage, CameraIntrinsics]:
    """Zero-pad bottom/right to padded_wh, resize to target_wh, rescale K.

    raw is an (H, W, 3) uint8 or float image; output values are in [0, 1].
    The resize factor target/padded applies linearly to fx, fy, cx, cy.
    """
    wt, ht = target_wh
    wp, hp = padded_wh
    h, w = raw.shape[:2]
    if h > hp or w > wp:
        raise ValueError(f"raw image {w}x{h} larger than padded size {wp}x{hp}")
    canvas = np.zeros((hp, wp, 3), dtype=np.float64)
    raw = np.asarray(raw, dtype=np.float64)
    if raw.max() > 1.0:
        raw = raw / 255.0
    canvas[:h, :w] = raw
    if (wt, ht) != (wp, hp):
        resized = cv2.resize(canvas, (wt, ht), interpolation=cv2.INTER_LINEAR)
    else:
        resized = canvas
    sx, sy = wt / wp, ht / hp
    image = CameraImage(np.clip(resized, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32))
    return image, intrinsics.scaled(sx, sy)


def render_lidar_image(
    pc: PointCloud,
    intrinsics: CameraIntrinsics,
    transform: SE3Transform,
    width: int,
    height: int,
    depth_scale: float = DEPTH_SCALE,
) -> LidarImage:
    """Project a cloud into a depth + intensity raster.

    Points with non-positive depth or landing outside the image are
    dropped; pixel conflicts keep the smallest depth (ties keep the
    earliest point). Pixels are the nearest integer of (u, v). The depth
    channel stores depth / depth_scale clipped to [0, 1].
    """
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    depth = np.zeros((height, width), dtype=np.float64)
    inten = np.zeros((height, width), dtype=np.float64)
    mask = np.zeros((height, width), dtype=bool)
    if len(pc) == 0:
        return LidarImage(depth, inten, mask)

    u, v, d, valid = project_points(pc.points, intrinsics, transform)
    ui = np.rint(u).astype(np.int64)
    vi = np.rint(v).astype(np.int64)
    valid &= (ui >= 0) & (ui < width) & (vi >= 0) & (vi < height)
    if not valid.any():
        return LidarImage(depth, inten, mask)

    ui, vi, d = ui[valid], vi[valid], d[valid]
    inten_pts = pc.intensity[valid]
    flat = vi * width + ui
    # stable sort by (pixel, depth): first entry per pixel is the z-buffer
    # winner, with ties resolved to the earliest point
    order = np.lexsort((d, flat))
    flat, d, inten_pts = flat[order], d[order], inten_pts[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    flat, d, inten_pts = flat[first], d[first], inten_pts[first]

    rows, cols = flat // width, flat % width
    depth[rows, cols] = np.clip(d / depth_scale, 0.0, 1.0)
    inten[rows, cols] = inten_pts
    mask[rows, cols] = True
    return LidarImage(depth, inten, mask)


def _depth_to_rgb(depth_norm: np.ndarray) -> np.ndarray:
    """Map normalized depth values (N,) to hue-ramp colors (near = red)."""
    hue = (depth_norm * 120.0).astype(np.uint8)  # OpenCV hue range is [0, 180)
    hsv = np.stack([hue, np.full_like(hue, 255), np.full_like(hue, 255)], axis=-1)
    bgr = cv2.cvtColor(hsv.reshape(-1, 1, 3), cv2.COLOR_HSV2BGR).reshape(-1, 3)
    return bgr[:, ::-1]


def depth_overlay(
    image_rgb: np.ndarray,
    pc: PointCloud,
    intrinsics: CameraIntrinsics,
    transform: SE3Transform,
    point_radius: int = 1,
    depth_scale: float = DEPTH_SCALE,
) -> np.ndarray:
    """Draw the projected cloud over a grayscale copy of the image.

    image_rgb is (H, W, 3) uint8; returns the same. Point color encodes
    depth through a fixed hue ramp so outputs are deterministic.
    """
    h, w = image_rgb.shape[:2]
    gray = cv2.cvtColor(image_rgb, cv2.COLOR_RGB2GRAY)
    canvas = cv2.cvtColor(gray, cv2.COLOR_GRAY2RGB)
    lidar = render_lidar_image(pc, intrinsics, transform, w, h, depth_scale)
    rows, cols = np.nonzero(lidar.mask)
    colors = _depth_to_rgb(lidar.depth[rows, cols])
    for r, c, color in zip(rows, cols, colors):
        cv2.circle(canvas, (int(c), int(r)), point_radius, color.tolist(), -1)
    return canvas
