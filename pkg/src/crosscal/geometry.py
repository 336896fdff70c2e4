"""SE(3), quaternion, and pinhole projection math.

All functions are pure and operate at float64. Conventions used throughout
the package:

* Quaternions are ``(w, x, y, z)`` scalar-first and canonicalized to
  ``w >= 0`` (a rotation and its sign-flipped quaternion are the same
  rotation; the canonical form picks one representative).
* Euler angles are intrinsic X-Y-Z (roll, pitch, yaw) in degrees, i.e.
  ``R = Rx(roll) @ Ry(pitch) @ Rz(yaw)``.
* An ``SE3Transform`` maps points ``p -> R @ p + t``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

ROTATION_TOL = 1e-6
DEGENERATE_DEPTH = 1e-9


class GimbalLockWarning(UserWarning):
    """Pitch within numerical reach of +-90 deg; yaw fixed to 0 by convention."""


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion (w, x, y, z)."""

    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, arr) -> "Quaternion":
        w, x, y, z = (float(v) for v in arr)
        return cls(w, x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def canonicalize(self) -> "Quaternion":
        """Return the unit-norm, w >= 0 representative of this rotation."""
        n = self.norm()
        if n < 1e-12:
            raise ValueError("cannot canonicalize a zero quaternion")
        s = 1.0 / n
        if self.w < 0.0:
            s = -s
        return Quaternion(self.w * s, self.x * s, self.y * s, self.z * s)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def multiply(self, other: "Quaternion") -> "Quaternion":
        """Hamilton product self * other."""
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )


def _check_rotation(rotation: np.ndarray, tol: float) -> None:
    if rotation.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rotation.shape}")
    err = np.abs(rotation.T @ rotation - np.eye(3)).max()
    det = np.linalg.det(rotation)
    if err > tol or abs(det - 1.0) > tol:
        raise ValueError(
            f"invalid rotation: orthonormality error {err:.3e}, det {det:.6f}"
        )


@dataclass(frozen=True)
class SE3Transform:
    """Rigid transform: ``apply(p) = rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(rot, ROTATION_TOL)
        if not np.all(np.isfinite(trans)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "SE3Transform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quat_trans(cls, q: Quaternion, t) -> "SE3Transform":
        return cls(quat_to_rotmat(q), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_matrix(cls, mat) -> "SE3Transform":
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {mat.shape}")
        return cls(mat[:3, :3], mat[:3, 3])

    def as_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def compose(self, other: "SE3Transform") -> "SE3Transform":
        """Matrix product self * other (other is applied first)."""
        return SE3Transform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "SE3Transform":
        rot_inv = self.rotation.T
        return SE3Transform(rot_inv, -rot_inv @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def as_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, sx: float, sy: float) -> "CameraIntrinsics":
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy)


@dataclass(frozen=True)
class PointCloud:
    """N points (meters) with per-point intensity in [0, 1]."""

    points: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(pts) != len(inten):
            raise ValueError(f"points ({len(pts)}) and intensity ({len(inten)}) length mismatch")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(inten))):
            raise ValueError("point cloud contains non-finite values")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class DeviationRange:
    """Symmetric per-axis bounds for random extrinsic perturbations."""

    max_translation: float  # meters
    max_rotation: float  # degrees

    def __post_init__(self):
        if self.max_translation < 0 or self.max_rotation < 0:
            raise ValueError("deviation bounds must be nonnegative")


def project_point(p, intrinsics: CameraIntrinsics, transform: SE3Transform):
    """Project one 3D point; returns (u, v, depth). Depth may be <= 0."""
    cam = transform.apply(np.asarray(p, dtype=np.float64))
    d = float(cam[2])
    if abs(d) < DEGENERATE_DEPTH:
        raise ValueError(f"degenerate projection depth {d:.3e}")
    u = intrinsics.fx * cam[0] / d + intrinsics.cx
    v = intrinsics.fy * cam[1] / d + intrinsics.cy
    return float(u), float(v), d


def project_points(points: np.ndarray, intrinsics: CameraIntrinsics, transform: SE3Transform):
    """Vectorized projection of an (N, 3) array.

    Returns (u, v, depth, valid) where valid marks depth above the
    degeneracy guard; u, v are unspecified where invalid. The transform is
    expanded elementwise (not via matmul) so each point sees the exact
    same floating-point expression a scalar evaluation would.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r, t = transform.rotation, transform.translation
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    px = x * r[0, 0] + y * r[0, 1] + z * r[0, 2] + t[0]
    py = x * r[1, 0] + y * r[1, 1] + z * r[1, 2] + t[1]
    d = x * r[2, 0] + y * r[2, 1] + z * r[2, 2] + t[2]
    valid = d >= DEGENERATE_DEPTH
    safe = np.where(valid, d, 1.0)
    u = intrinsics.fx * px / safe + intrinsics.cx
    v = intrinsics.fy * py / safe + intrinsics.cy
    return u, v, d, valid


def quat_to_rotmat(q: Quaternion) -> np.ndarray:
    """Rotation matrix of a unit quaternion."""
    if abs(q.norm() - 1.0) > 1e-3:
        raise ValueError(f"quaternion norm {q.norm():.6f} too far from 1")
    q = q.canonicalize()
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(rotation: np.ndarray) -> Quaternion:
    """Canonical quaternion of a rotation matrix (branch-stable)."""
    rotation = np.asarray(rotation, dtype=np.float64)
    _check_rotation(rotation, 1e-3)
    m = rotation
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    # pick the largest diagonal-derived pivot to stay away from 0-divisions
    if trace > 0:
        s = math.sqrt(trace + 1.0) * 2.0
        q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
    return Quaternion(*q).canonicalize()


def euler_to_rotmat(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Intrinsic X-Y-Z rotation from degrees: Rx(roll) @ Ry(pitch) @ Rz(yaw)."""
    a, b, c = math.radians(roll), math.radians(pitch), math.radians(yaw)
    ca, sa = math.cos(a), math.sin(a)
    cb, sb = math.cos(b), math.sin(b)
    cc, sc = math.cos(c), math.sin(c)
    return np.array(
        [
            [cb * cc, -cb * sc, sb],
            [ca * sc + sa * sb * cc, ca * cc - sa * sb * sc, -sa * cb],
            [sa * sc - ca * sb * cc, sa * cc + ca * sb * sc, ca * cb],
        ]
    )


def euler_to_quat(roll: float, pitch: float, yaw: float) -> Quaternion:
    return rotmat_to_quat(euler_to_rotmat(roll, pitch, yaw))


def _wrap_half_open(deg: float) -> float:
    """Map to (-180, 180]."""
    deg = math.fmod(deg, 360.0)
    if deg <= -180.0:
        deg += 360.0
    elif deg > 180.0:
        deg -= 360.0
    return deg


def quat_to_euler(q: Quaternion):
    """Intrinsic X-Y-Z (roll, pitch, yaw) in degrees.

    roll, yaw in (-180, 180], pitch in [-90, 90]. At gimbal lock
    (|pitch| = 90 within tolerance) yaw is fixed to 0 and a
    GimbalLockWarning is emitted.
    """
    m = quat_to_rotmat(q)
    sp = min(1.0, max(-1.0, m[0, 2]))
    pitch = math.degrees(math.asin(sp))
    if 1.0 - abs(sp) < 1e-12 or abs(abs(pitch) - 90.0) < 1e-6:
        warnings.warn("pitch at +-90 deg: yaw set to 0 by convention", GimbalLockWarning)
        # with cb = 0 only roll +- yaw is observable; attribute it all to roll
        roll = math.degrees(math.atan2(m[2, 1], m[1, 1]))
        return _wrap_half_open(roll), 90.0 if sp > 0 else -90.0, 0.0
    roll = math.degrees(math.atan2(-m[1, 2], m[2, 2]))
    yaw = math.degrees(math.atan2(-m[0, 1], m[0, 0]))
    return _wrap_half_open(roll), pitch, _wrap_half_open(yaw)


def quat_angular_distance(q1: Quaternion, q2: Quaternion) -> float:
    """Angle in [0, pi] between two rotations, sign-flip invariant.

    Computed as 2*atan2(||Im(r)||, |Re(r)|) with r = q1 * q2^-1; the
    two-argument arctangent keeps the formula defined at Re(r) = 0 and the
    absolute real part folds the double cover onto [0, pi].
    """
    r = q1.canonicalize().multiply(q2.canonicalize().conjugate())
    im = math.sqrt(r.x**2 + r.y**2 + r.z**2)
    return 2.0 * math.atan2(im, abs(r.w))


def compose_calibration(t_pred: SE3Transform, t_init: SE3Transform) -> SE3Transform:
    """Recover the corrected extrinsic: inverse(prediction) * initial."""
    return t_pred.inverse().compose(t_init)


def sample_deviation(dev_range: DeviationRange, seed: int) -> SE3Transform:
    """Random SE(3) perturbation, uniform per axis, deterministic per seed.

    Translation axes are i.i.d. uniform in [-max_translation, +max_translation];
    rotation is built from per-axis Euler angles i.i.d. uniform in
    [-max_rotation, +max_rotation], composed intrinsic X-Y-Z. Draw order
    (translation first, then roll/pitch/yaw) is part of the determinism
    contract.
    """
    rng = np.random.default_rng(seed)
    t = rng.uniform(-dev_range.max_translation, dev_range.max_translation, size=3)
    angles = rng.uniform(-dev_range.max_rotation, dev_range.max_rotation, size=3)
    return SE3Transform(euler_to_rotmat(*angles), t)


def point_cloud_distance(t_gt: SE3Transform, t_pred: SE3Transform, pc: PointCloud) -> float:
    """Mean norm of (T_gt^-1 * T_pred) p - p over the cloud."""
    if len(pc) == 0:
        raise ValueError("point cloud is empty")
    rel = t_gt.inverse().compose(t_pred)
    moved = rel.apply(pc.points)
    return float(np.linalg.norm(moved - pc.points, axis=1).mean())
