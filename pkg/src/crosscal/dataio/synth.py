"""Synthetic scene generation.

Scenes are built in the camera frame: a ground plane plus randomly placed
boxes inside the viewing frustum. The same surfaces produce both the RGB
image (dense splatting with flat shading) and the point cloud (sparse
sampling, expressed in the LiDAR frame), so the two modalities share
structure the way a real rig's do.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from ..geometry import CameraIntrinsics, DeviationRange, PointCloud, SE3Transform

# Fixed rig: camera x right / y down / z forward, LiDAR x forward / y left
# / z up, plus a small lever arm. One rig for all scenes; the deviation
# augmentation supplies the variability.
RIG_ROTATION = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
RIG_TRANSLATION = np.array([0.03, -0.08, -0.15])

LIGHT_DIR = np.array([0.35, -0.8, 0.49])  # fixed scene light, camera frame


@dataclass
class SynthSceneParams:
    width: int = 512
    height: int = 256
    min_boxes: int = 4
    max_boxes: int = 9
    near: float = 4.0
    far: float = 28.0
    min_box_size: float = 0.6
    max_box_size: float = 4.0
    focal_factor: float = 0.55  # fx = fy = focal_factor * width
    ground_y: float = 1.5  # meters below the camera (y points down)
    paint_samples_per_pixel: float = 3.0

    def intrinsics(self) -> CameraIntrinsics:
        f = self.focal_factor * self.width
        return CameraIntrinsics(f, f, self.width / 2.0, self.height / 2.0)


@dataclass
class _Surface:
    """One textured rectangle: origin + two edge vectors, camera frame."""

    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray  # RGB in [0, 1]
    reflectance: float

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))


def rig_extrinsic() -> SE3Transform:
    return SE3Transform(RIG_ROTATION, RIG_TRANSLATION)


def _box_surfaces(center, half, yaw, albedo, reflectance) -> list[_Surface]:
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])  # about camera y
    ax = rot @ np.array([half[0], 0, 0])
    ay = rot @ np.array([0, half[1], 0])
    az = rot @ np.array([0, 0, half[2]])
    faces = []
    for sign, a, b, n in (
        (+1, ay, az, ax),
        (-1, ay, az, -ax),
        (+1, ax, az, ay),
        (-1, ax, az, -ay),
        (+1, ax, ay, az),
        (-1, ax, ay, -az),
    ):
        origin = center + sign * (n) - a - b
        faces.append(
            _Surface(
                origin=origin,
                edge_u=2 * a,
                edge_v=2 * b,
                normal=n / np.linalg.norm(n),
                albedo=albedo,
                reflectance=reflectance,
            )
        )
    return faces


def _build_surfaces(rng: np.random.Generator, params: SynthSceneParams) -> list[_Surface]:
    intr = params.intrinsics()
    surfaces: list[_Surface] = []
    # ground plane quad spanning the frustum footprint
    far_half_w = (params.width / 2.0) / intr.fx * params.far
    surfaces.append(
        _Surface(
            origin=np.array([-far_half_w, params.ground_y, params.near * 0.8]),
            edge_u=np.array([2 * far_half_w, 0.0, 0.0]),
            edge_v=np.array([0.0, 0.0, params.far - params.near * 0.8]),
            normal=np.array([0.0, -1.0, 0.0]),
            albedo=rng.uniform(0.25, 0.5) * np.ones(3),
            reflectance=float(rng.uniform(0.1, 0.3)),
        )
    )
    n_boxes = int(rng.integers(params.min_boxes, params.max_boxes + 1))
    for _ in range(n_boxes):
        z = rng.uniform(params.near, params.far)
        u = rng.uniform(0.15 * params.width, 0.85 * params.width)
        v = rng.uniform(0.2 * params.height, 0.8 * params.height)
        center = np.array(
            [(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z]
        )
        half = rng.uniform(params.min_box_size, params.max_box_size, size=3) / 2.0
        yaw = rng.uniform(0, 2 * np.pi)
        albedo = rng.uniform(0.2, 1.0, size=3)
        reflectance = float(rng.uniform(0.2, 1.0))
        surfaces.extend(_box_surfaces(center, half, yaw, albedo, reflectance))
    return surfaces


def _sample_surfaces(surfaces, rng, n: int):
    """Draw n surface points weighted by area.

    Returns points (n, 3), normals, albedos (n, 3), reflectances (n,).
    """
    areas = np.array([s.area for s in surfaces])
    counts = rng.multinomial(n, areas / areas.sum())
    pts, normals, albedos, refl = [], [], [], []
    for surf, k in zip(surfaces, counts):
        if k == 0:
            continue
        a = rng.uniform(0, 1, size=(k, 1))
        b = rng.uniform(0, 1, size=(k, 1))
        pts.append(surf.origin + a * surf.edge_u + b * surf.edge_v)
        normals.append(np.tile(surf.normal, (k, 1)))
        albedos.append(np.tile(surf.albedo, (k, 1)))
        refl.append(np.full(k, surf.reflectance))
    return (
        np.concatenate(pts),
        np.concatenate(normals),
        np.concatenate(albedos),
        np.concatenate(refl),
    )


def _paint_image(points, normals, albedos, params: SynthSceneParams) -> np.ndarray:
    """Z-buffered splat render with flat Lambertian shading; black background."""
    intr = params.intrinsics()
    w, h = params.width, params.height
    light = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
    shade = 0.3 + 0.7 * np.abs(normals @ light)
    colors = np.clip(albedos * shade[:, None], 0.0, 1.0)

    z = points[:, 2]
    keep = z > 0.1
    points, colors, z = points[keep], colors[keep], z[keep]
    u = np.rint(intr.fx * points[:, 0] / z + intr.cx).astype(np.int64)
    v = np.rint(intr.fy * points[:, 1] / z + intr.cy).astype(np.int64)

    # replicate each sample over a 3x3 splat to close coverage holes
    du, dv = np.meshgrid([-1, 0, 1], [-1, 0, 1])
    uu = (u[:, None] + du.ravel()[None, :]).ravel()
    vv = (v[:, None] + dv.ravel()[None, :]).ravel()
    zz = np.repeat(z, 9)
    cc = np.repeat(colors, 9, axis=0)
    ok = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
    uu, vv, zz, cc = uu[ok], vv[ok], zz[ok], cc[ok]

    flat = vv * w + uu
    order = np.lexsort((zz, flat))
    flat, cc = flat[order], cc[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    image = np.zeros((h * w, 3), dtype=np.float64)
    image[flat[first]] = cc[first]
    return (image.reshape(h, w, 3) * 255.0).astype(np.uint8)


def synth_scene(seed: int, n_points: int, params: SynthSceneParams | None = None):
    """Generate one scene; returns (image, cloud, intrinsics, t_lc).

    image is (H, W, 3) uint8 RGB; cloud points are in the LiDAR frame with
    reflectance-derived intensities.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    params = params or SynthSceneParams()
    rng = np.random.default_rng(seed)
    surfaces = _build_surfaces(rng, params)

    n_paint = int(params.paint_samples_per_pixel * params.width * params.height)
    paint_pts, paint_nrm, paint_alb, _ = _sample_surfaces(surfaces, rng, n_paint)
    image = _paint_image(paint_pts, paint_nrm, paint_alb, params)

    cloud_pts, _, _, cloud_refl = _sample_surfaces(surfaces, rng, n_points)
    intensity = np.clip(cloud_refl + rng.normal(0, 0.02, size=len(cloud_refl)), 0.0, 1.0)
    t_lc = rig_extrinsic()
    lidar_pts = t_lc.inverse().apply(cloud_pts)
    return image, PointCloud(lidar_pts, intensity), params.intrinsics(), t_lc


def write_synth_dataset(
    out_dir: str | Path,
    n_scenes: int,
    n_points: int,
    seed: int,
    deviation: DeviationRange,
    params: SynthSceneParams | None = None,
    target_wh: tuple[int, int] | None = None,
    split: str = "train",
) -> Path:
    """Materialize scenes + manifest.json under out_dir; returns manifest path.

    Layout: scene_<NNNN>/{image.png, cloud.bin, calib.json}. Clouds use the
    same float32 x,y,z,intensity record format as the road-dataset scans.
    """
    params = params or SynthSceneParams()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene_seeds = [
        int(np.random.SeedSequence([seed, i]).generate_state(1)[0]) for i in range(n_scenes)
    ]
    scenes = []
    for i, scene_seed in enumerate(scene_seeds):
        image, cloud, intr, t_lc = synth_scene(scene_seed, n_points, params)
        scene_dir = out / f"scene_{i:04d}"
        scene_dir.mkdir(exist_ok=True)
        cv2.imwrite(str(scene_dir / "image.png"), image[:, :, ::-1])
        rec = np.column_stack([cloud.points, cloud.intensity]).astype("<f4")
        rec.tofile(scene_dir / "cloud.bin")
        with open(scene_dir / "calib.json", "w") as fh:
            json.dump(
                {
                    "fx": intr.fx,
                    "fy": intr.fy,
                    "cx": intr.cx,
                    "cy": intr.cy,
                    "t_lc": t_lc.as_matrix().tolist(),
                },
                fh,
                indent=2,
            )
        scenes.append(scene_dir.name)

    wt, ht = target_wh or (params.width, params.height)
    manifest = {
        "kind": "synthetic",
        "split": split,
        "scenes": scenes,
        "seeds": scene_seeds,
        "n_points": n_points,
        "resolution": {
            "raw": [params.width, params.height],
            "padded": [params.width, params.height],
            "target": [wt, ht],
        },
        "deviation": {
            "max_translation": deviation.max_translation,
            "max_rotation": deviation.max_rotation,
        },
        "seed": seed,
    }
    manifest_path = out / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest_path
