"""Pinhole camera geometry: intrinsics from FOV, depth backprojection, normals.

All functions are pure numpy; priors are treated as constants by the network,
so nothing here participates in differentiation.
"""

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CameraIntrinsics", "intrinsics_from_fov", "backproject",
    "normals_from_points", "normalize_normal_map",
]


@dataclass(frozen=True)
class CameraIntrinsics:
    fov_degrees: float
    f: float
    cx: float
    cy: float


def intrinsics_from_fov(fov_degrees, width, height):
    """Focal length and principal point for a given horizontal field of view.

    f = W / (2 tan(fov/2)), cx = (W-1)/2, cy = (H-1)/2, evaluated in double
    precision.
    """
    if not 0.0 < fov_degrees < 180.0:
        raise ValueError(f"fov must be in (0, 180) degrees, got {fov_degrees}")
    if width < 2 or height < 2:
        raise ValueError("image must be at least 2x2")
    fov_rad = fov_degrees * math.pi / 180.0
    f = width / (2.0 * math.tan(fov_rad / 2.0))
    return CameraIntrinsics(fov_degrees, f, (width - 1) / 2.0, (height - 1) / 2.0)


def backproject(depth, intr):
    """Lift a (H,W) depth map to camera-space points (H,W,3).

    x3d = (x - cx) z / f, y3d = (y - cy) z / f; the z channel is the input
    depth, bit for bit.
    """
    depth = np.asarray(depth)
    h, w = depth.shape
    xs = (np.arange(w, dtype=depth.dtype) - depth.dtype.type(intr.cx)) / depth.dtype.type(intr.f)
    ys = (np.arange(h, dtype=depth.dtype) - depth.dtype.type(intr.cy)) / depth.dtype.type(intr.f)
    points = np.empty((h, w, 3), dtype=depth.dtype)
    points[..., 0] = xs[None, :] * depth
    points[..., 1] = ys[:, None] * depth
    points[..., 2] = depth
    return points


def normals_from_points(points):
    """Per-pixel unit normals from a point map via central-difference tangents.

    Tangents use central differences in the interior and one-sided differences
    at borders (numpy.gradient).  The normal is the cross product of the two
    tangents, normalized, with the sign flipped so the z component is >= 0.
    Degenerate pixels (zero cross product) yield a zero vector and are marked
    False in the returned validity mask.
    """
    points = np.asarray(points)
    h, w = points.shape[:2]
    if h < 3 or w < 3:
        raise ValueError("point map must be at least 3x3")
    ty, tx = np.gradient(points, axis=(0, 1))
    n = np.cross(tx, ty)
    norm = np.sqrt((n * n).sum(axis=-1))
    valid = norm > 1e-20
    n = np.where(valid[..., None], n / np.where(valid, norm, 1.0)[..., None], 0.0)
    flip = n[..., 2] < 0
    n[flip] = -n[flip]
    return n.astype(points.dtype), valid


def normalize_normal_map(raw):
    """Rescale a [0,1]-encoded normal map to [-1,1] and normalize per pixel.

    The epsilon in the denominator (1e-20) preserves exact zero vectors.
    """
    raw = np.asarray(raw)
    n = raw * raw.dtype.type(2.0) - raw.dtype.type(1.0)
    norm = np.sqrt((n * n).sum(axis=-1, keepdims=True))
    return n / (norm + raw.dtype.type(1e-20))
