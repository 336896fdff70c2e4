"""KITTI odometry readers.

Expected layout under a dataset root:

    sequences/<NN>/velodyne/<FFFFFF>.bin   little-endian float32 x, y, z, reflectance
    sequences/<NN>/image_2/<FFFFFF>.png
    sequences/<NN>/calib.txt               'P2:' and 'Tr:' rows of 12 decimals
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ..geometry import CameraIntrinsics, PointCloud, SE3Transform

RECORD_BYTES = 16  # four float32 fields per point


def load_kitti_cloud(path: str | os.PathLike) -> PointCloud:
    """Read a velodyne .bin scan into a PointCloud."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size * 4 % RECORD_BYTES != 0:
        raise ValueError(
            f"malformed cloud file {path}: {raw.size * 4} bytes is not a "
            f"multiple of {RECORD_BYTES}"
        )
    records = raw.reshape(-1, 4).astype(np.float64)
    return PointCloud(records[:, :3], records[:, 3])


def _parse_3x4(tokens: list[str], key: str, path) -> np.ndarray:
    if len(tokens) != 12:
        raise ValueError(f"malformed calib {path}: {key} needs 12 values, got {len(tokens)}")
    return np.array([float(t) for t in tokens], dtype=np.float64).reshape(3, 4)


def load_kitti_calib(path: str | os.PathLike) -> tuple[CameraIntrinsics, SE3Transform]:
    """Parse calib.txt; returns camera-2 intrinsics and the composed
    velodyne-to-rectified-camera-2 transform.

    P2 = K [I | b] gives the rectified-camera baseline b = K^-1 P2[:, 3],
    which is folded into the Tr (velodyne -> camera-0) transform.
    """
    entries: dict[str, np.ndarray] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or ":" not in line:
                continue
            key, _, rest = line.partition(":")
            entries[key.strip()] = _parse_3x4(rest.split(), key.strip(), path)
    for key in ("P2", "Tr"):
        if key not in entries:
            raise ValueError(f"malformed calib {path}: missing '{key}:' row")
    p2, tr = entries["P2"], entries["Tr"]
    intr = CameraIntrinsics(fx=p2[0, 0], fy=p2[1, 1], cx=p2[0, 2], cy=p2[1, 2])
    baseline = np.linalg.solve(p2[:, :3], p2[:, 3])
    t_lc = SE3Transform(tr[:, :3], tr[:, 3] + baseline)
    return intr, t_lc


def sequence_frames(root: str | os.PathLike, sequence: str) -> list[str]:
    """Frame ids (zero-padded strings) available in one sequence."""
    velo = Path(root) / "sequences" / sequence / "velodyne"
    if not velo.is_dir():
        raise FileNotFoundError(f"no velodyne directory for sequence {sequence} under {root}")
    return sorted(p.stem for p in velo.glob("*.bin"))


def frame_paths(root: str | os.PathLike, sequence: str, frame: str) -> tuple[Path, Path, Path]:
    seq_dir = Path(root) / "sequences" / sequence
    return (
        seq_dir / "velodyne" / f"{frame}.bin",
        seq_dir / "image_2" / f"{frame}.png",
        seq_dir / "calib.txt",
    )
