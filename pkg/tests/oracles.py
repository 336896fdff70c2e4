"""Independent reference implementations used by the test suite.

These deliberately use scalar loops and explicit arithmetic so they share
no code path with the vectorized implementations they check.
"""

import numpy as np

from crosscal.geometry import CameraIntrinsics, PointCloud, SE3Transform


def brute_force_lidar_raster(
    pc: PointCloud,
    intr: CameraIntrinsics,
    transform: SE3Transform,
    width: int,
    height: int,
    depth_scale: float = 80.0,
):
    """Per-point loop raster with keep-nearest z-buffer (ties: earliest point).

    The camera-frame coordinates are written as the same explicit
    expression tree the production projection uses, so agreement can be
    asserted bit-for-bit.
    """
    r, t = transform.rotation, transform.translation
    depth = np.zeros((height, width), dtype=np.float64)
    inten = np.zeros((height, width), dtype=np.float64)
    mask = np.zeros((height, width), dtype=bool)
    best = np.full((height, width), np.inf)
    for i in range(len(pc)):
        x, y, z = (float(v) for v in pc.points[i])
        px = x * r[0, 0] + y * r[0, 1] + z * r[0, 2] + t[0]
        py = x * r[1, 0] + y * r[1, 1] + z * r[1, 2] + t[1]
        d = x * r[2, 0] + y * r[2, 1] + z * r[2, 2] + t[2]
        if d < 1e-9:
            continue
        u = intr.fx * px / d + intr.cx
        v = intr.fy * py / d + intr.cy
        ui = int(np.rint(u))
        vi = int(np.rint(v))
        if not (0 <= ui < width and 0 <= vi < height):
            continue
        if d < best[vi, ui]:
            best[vi, ui] = d
            norm = d / depth_scale
            depth[vi, ui] = min(max(norm, 0.0), 1.0)
            inten[vi, ui] = pc.intensity[i]
            mask[vi, ui] = True
    return depth, inten, mask


def correlation_volume_loops(q, k, radius: int, scale: float):
    """Five-nested-loop windowed correlation oracle.

    q, k: (n_heads, head_dim, H, W) numpy arrays. Returns
    (n_heads * (2*radius+1)**2, H, W) with head-major, offset-row-major
    channel layout; out-of-bounds offsets are 0.
    """
    n_heads, head_dim, h, w = q.shape
    side = 2 * radius + 1
    out = np.zeros((n_heads * side * side, h, w))
    for head in range(n_heads):
        for dy in range(-radius, radius + 1):
            for dx in range(-radius, radius + 1):
                ch = head * side * side + (dy + radius) * side + (dx + radius)
                for yy in range(h):
                    for xx in range(w):
                        sy, sx = yy + dy, xx + dx
                        if not (0 <= sy < h and 0 <= sx < w):
                            continue
                        acc = 0.0
                        for c in range(head_dim):
                            acc += q[head, c, yy, xx] * k[head, c, sy, sx]
                        out[ch, yy, xx] = acc / scale
    return out
