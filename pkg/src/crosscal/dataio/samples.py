"""Sample assembly: raw frames + deviation augmentation -> training units."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from ..geometry import (
    CameraIntrinsics,
    DeviationRange,
    PointCloud,
    SE3Transform,
    sample_deviation,
)
from .imaging import CameraImage, LidarImage, preprocess_camera, render_lidar_image
from .kitti import frame_paths, load_kitti_calib, load_kitti_cloud, sequence_frames


def derive_seed(*parts: int) -> int:
    """Deterministic child seed from (base seed, epoch, index, ...)."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class PreprocessSpec:
    """Camera preprocessing geometry: pad to padded_wh, resize to target_wh."""

    target_wh: tuple[int, int]
    padded_wh: tuple[int, int]


@dataclass
class RawFrame:
    """One dataset frame before augmentation."""

    frame_id: str
    image: np.ndarray  # (H, W, 3) uint8 RGB
    cloud: PointCloud
    intrinsics: CameraIntrinsics
    t_lc: SE3Transform


@dataclass
class CalibrationSample:
    """One training/eval unit.

    lidar was rendered with exactly this intrinsics and t_init, so
    render_lidar_image(cloud, intrinsics, t_init, W, H) reproduces it
    bit-for-bit. t_gt is the injected deviation (t_init = t_gt * t_lc).
    """

    camera: CameraImage
    lidar: LidarImage
    cloud: PointCloud
    intrinsics: CameraIntrinsics
    t_init: SE3Transform
    t_gt: SE3Transform


def make_sample(
    frame: RawFrame,
    dev_range: DeviationRange,
    seed: int,
    prep: PreprocessSpec,
) -> CalibrationSample:
    """Perturb the frame extrinsic and render the misaligned LiDAR image."""
    delta = sample_deviation(dev_range, seed)
    t_init = delta.compose(frame.t_lc)
    camera, intr = preprocess_camera(frame.image, prep.target_wh, prep.padded_wh, frame.intrinsics)
    wt, ht = prep.target_wh
    lidar = render_lidar_image(frame.cloud, intr, t_init, wt, ht)
    return CalibrationSample(
        camera=camera,
        lidar=lidar,
        cloud=frame.cloud,
        intrinsics=intr,
        t_init=t_init,
        t_gt=delta,
    )


def subsample_points(pc: PointCloud, cap: int, seed: int) -> np.ndarray:
    """Seeded fixed-size draw of cloud points for the distance loss.

    Returns exactly cap points; clouds smaller than cap are sampled with
    replacement so batches stack.
    """
    rng = np.random.default_rng(seed)
    n = len(pc)
    if n == 0:
        raise ValueError("cannot subsample an empty cloud")
    idx = rng.choice(n, size=cap, replace=n < cap)
    return pc.points[idx]


@dataclass
class DatasetManifest:
    """Resolved description of a dataset split.

    entries are scene directory names (synthetic) or (sequence, frame)
    pairs (road data). All referenced files are checked at load time.
    """

    kind: str
    root: Path
    entries: list
    deviation: DeviationRange
    prep: PreprocessSpec
    seed: int
    split: str = ""

    @classmethod
    def from_file(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        root = path.parent
        with open(path) as fh:
            data = json.load(fh)
        dev = DeviationRange(
            data["deviation"]["max_translation"], data["deviation"]["max_rotation"]
        )
        res = data["resolution"]
        prep = PreprocessSpec(tuple(res["target"]), tuple(res["padded"]))
        kind = data["kind"]
        if kind == "synthetic":
            entries = list(data["scenes"])
            missing = [
                s
                for s in entries
                for f in ("image.png", "cloud.bin", "calib.json")
                if not (root / s / f).exists()
            ]
        elif kind == "kitti":
            entries = [(str(seq), str(frame)) for seq, frame in data["frames"]]
            missing = [
                f"{seq}/{frame}"
                for seq, frame in entries
                if not all(p.exists() for p in frame_paths(root / data["kitti_root"], seq, frame))
            ]
        else:
            raise ValueError(f"unknown dataset kind {kind!r}")
        if missing:
            raise FileNotFoundError(f"manifest {path}: missing files for {missing[:5]}")
        obj = cls(
            kind=kind,
            root=root,
            entries=entries,
            deviation=dev,
            prep=prep,
            seed=int(data.get("seed", 0)),
            split=data.get("split", ""),
        )
        if kind == "kitti":
            obj.kitti_root = root / data["kitti_root"]  # type: ignore[attr-defined]
        return obj


def kitti_manifest_dict(
    kitti_root: str | Path,
    sequences: list[str],
    deviation: DeviationRange,
    seed: int,
    split: str,
    frames_per_seq: int | None = None,
    target_wh: tuple[int, int] = (512, 256),
    padded_wh: tuple[int, int] = (1280, 384),
    stored_root: str | None = None,
) -> dict:
    """Build a manifest dict enumerating KITTI frames (helper for tooling).

    kitti_root is scanned now; stored_root (default: kitti_root as given)
    is what the manifest records, resolved relative to the manifest file.
    """
    frames = []
    for seq in sequences:
        ids = sequence_frames(kitti_root, seq)
        if frames_per_seq is not None:
            ids = ids[:frames_per_seq]
        frames.extend([seq, fid] for fid in ids)
    return {
        "kind": "kitti",
        "split": split,
        "kitti_root": stored_root if stored_root is not None else str(kitti_root),
        "frames": frames,
        "resolution": {"padded": list(padded_wh), "target": list(target_wh)},
        "deviation": {
            "max_translation": deviation.max_translation,
            "max_rotation": deviation.max_rotation,
        },
        "seed": seed,
    }


class CalibrationDataset:
    """Frame store + deterministic per-epoch deviation augmentation.

    sample(idx, epoch) draws the deviation from seed
    derive_seed(manifest.seed, epoch, idx): fresh deviations every epoch
    during training, and a frozen set at epoch 0 for validation.
    """

    def __init__(self, manifest: DatasetManifest, cache_frames: bool = True):
        self.manifest = manifest
        self._cache: dict[int, RawFrame] | None = {} if cache_frames else None

    @classmethod
    def from_file(cls, path: str | Path, cache_frames: bool = True) -> "CalibrationDataset":
        return cls(DatasetManifest.from_file(path), cache_frames)

    def __len__(self) -> int:
        return len(self.manifest.entries)

    def frame(self, idx: int) -> RawFrame:
        if self._cache is not None and idx in self._cache:
            return self._cache[idx]
        frame = self._load_frame(idx)
        if self._cache is not None:
            self._cache[idx] = frame
        return frame

    def _load_frame(self, idx: int) -> RawFrame:
        m = self.manifest
        if m.kind == "synthetic":
            scene_dir = m.root / m.entries[idx]
            bgr = cv2.imread(str(scene_dir / "image.png"), cv2.IMREAD_COLOR)
            if bgr is None:
                raise FileNotFoundError(scene_dir / "image.png")
            cloud = load_kitti_cloud(scene_dir / "cloud.bin")
            with open(scene_dir / "calib.json") as fh:
                calib = json.load(fh)
            intr = CameraIntrinsics(calib["fx"], calib["fy"], calib["cx"], calib["cy"])
            t_lc = SE3Transform.from_matrix(np.array(calib["t_lc"]))
            return RawFrame(m.entries[idx], bgr[:, :, ::-1].copy(), cloud, intr, t_lc)
        seq, fid = m.entries[idx]
        cloud_path, image_path, calib_path = frame_paths(self.kitti_root, seq, fid)
        bgr = cv2.imread(str(image_path), cv2.IMREAD_COLOR)
        if bgr is None:
            raise FileNotFoundError(image_path)
        intr, t_lc = load_kitti_calib(calib_path)
        cloud = load_kitti_cloud(cloud_path)
        return RawFrame(f"{seq}/{fid}", bgr[:, :, ::-1].copy(), cloud, intr, t_lc)

    @property
    def kitti_root(self) -> Path:
        return getattr(self.manifest, "kitti_root", self.manifest.root)

    def sample(self, idx: int, epoch: int = 0) -> CalibrationSample:
        seed = derive_seed(self.manifest.seed, epoch, idx)
        return make_sample(self.frame(idx), self.manifest.deviation, seed, self.manifest.prep)
