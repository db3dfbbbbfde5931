"""Pinhole camera geometry between pixel, camera and LiDAR frames.

Conventions
-----------
* All matrices are 4x4 homogeneous. ``intrinsic`` maps camera-frame points
  ``(x, y, z, 1)`` to ``(u*z, v*z, z, 1)``; ``extrinsic`` maps LiDAR-frame
  points to the camera frame (rotation and translation in one rigid matrix).
* Camera frame: x right, y down, z forward. Depth means camera-frame z.
* Point arrays carry coordinates on the last axis, so every function accepts
  a single point of shape ``(3,)`` or a batch ``(..., 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, DomainError, InvalidCameraError, InvalidRangeError

SINGULAR_CONDITION = 1e12
ORTHO_TOL = 1e-9


def invert_matrix(a):
    """Invert a square matrix by Gauss-Jordan elimination with partial pivoting.

    Raises InvalidCameraError when a pivot vanishes or the 1-norm condition
    number exceeds ``SINGULAR_CONDITION``.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise InvalidCameraError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidCameraError("matrix has non-finite entries")
    aug = np.hstack([a, np.eye(n)])
    for col in range(n):
        piv = col + int(np.argmax(np.abs(aug[col:, col])))
        if aug[piv, col] == 0.0:
            raise InvalidCameraError("matrix is singular")
        if piv != col:
            aug[[col, piv]] = aug[[piv, col]]
        aug[col] /= aug[col, col]
        others = np.arange(n) != col
        aug[others] -= np.outer(aug[others, col], aug[col])
    inv = aug[:, n:]
    cond = np.abs(a).sum(axis=0).max() * np.abs(inv).sum(axis=0).max()
    if not np.isfinite(cond) or cond > SINGULAR_CONDITION:
        raise InvalidCameraError(f"matrix is ill-conditioned (cond={cond:.3g})")
    return inv


def _rigid_inverse(e):
    rot, trans = e[:3, :3], e[:3, 3]
    inv = np.eye(4)
    inv[:3, :3] = rot.T
    inv[:3, 3] = -rot.T @ trans
    return inv


def check_rigid(e):
    """Raise InvalidCameraError unless ``e`` is a 4x4 rigid transform."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (4, 4) or not np.all(np.isfinite(e)):
        raise InvalidCameraError("extrinsic must be a finite 4x4 matrix")
    if np.max(np.abs(e[3] - [0.0, 0.0, 0.0, 1.0])) > ORTHO_TOL:
        raise InvalidCameraError("extrinsic bottom row must be (0, 0, 0, 1)")
    rot = e[:3, :3]
    if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHO_TOL:
        raise InvalidCameraError("extrinsic rotation block is not orthonormal")
    if np.linalg.det(rot) <= 0.0:
        raise InvalidCameraError("extrinsic rotation block is a reflection")


@dataclass(frozen=True, eq=False)
class CameraParams:
    """Intrinsic and extrinsic (camera <- LiDAR) matrices of one view."""

    intrinsic: np.ndarray
    extrinsic: np.ndarray
    intrinsic_inv: np.ndarray = field(init=False, repr=False)
    extrinsic_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        k = np.array(self.intrinsic, dtype=np.float64)
        e = np.array(self.extrinsic, dtype=np.float64)
        if k.shape != (4, 4):
            raise InvalidCameraError("intrinsic must be 4x4")
        check_rigid(e)
        k.flags.writeable = False
        e.flags.writeable = False
        k_inv = invert_matrix(k)
        e_inv = _rigid_inverse(e)
        k_inv.flags.writeable = False
        e_inv.flags.writeable = False
        object.__setattr__(self, "intrinsic", k)
        object.__setattr__(self, "extrinsic", e)
        object.__setattr__(self, "intrinsic_inv", k_inv)
        object.__setattr__(self, "extrinsic_inv", e_inv)

    def __eq__(self, other):
        if not isinstance(other, CameraParams):
            return NotImplemented
        return bool(np.array_equal(self.intrinsic, other.intrinsic)
                    and np.array_equal(self.extrinsic, other.extrinsic))

    def to_array(self):
        """Row-major 32 values: intrinsic then extrinsic."""
        return np.concatenate([self.intrinsic.ravel(), self.extrinsic.ravel()])

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(values[:16].reshape(4, 4), values[16:32].reshape(4, 4))

    @property
    def lidar_to_image(self):
        """K @ E, mapping LiDAR points to (u*z, v*z, z, 1)."""
        return self.intrinsic @ self.extrinsic

    @property
    def center(self):
        """Camera position in the LiDAR frame."""
        return self.extrinsic_inv[:3, 3].copy()


def pinhole_intrinsic(fx, fy, cx, cy):
    k = np.eye(4)
    k[0, 0], k[1, 1], k[0, 2], k[1, 2] = fx, fy, cx, cy
    return k


def look_extrinsic(position, yaw, pitch=0.0):
    """Camera <- LiDAR transform for a camera at ``position`` looking along
    heading ``yaw`` (radians about LiDAR +z, 0 = +x) tilted by ``pitch``."""
    cy_, sy_ = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    forward = np.array([cy_ * cp, sy_ * cp, -sp])
    right = np.array([sy_, -cy_, 0.0])
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    e = np.eye(4)
    e[:3, :3] = rot
    e[:3, 3] = -rot @ np.asarray(position, dtype=np.float64)
    return e


def _apply(mat, pts):
    return pts @ mat[:3, :3].T + mat[:3, 3]


def pixel_to_camera(uvd, cam):
    """Lift pixels ``(u, v, depth)`` to camera-frame points.

    Computes ``K^-1 (u*D, v*D, D, 1)`` and restores the homogeneous
    coordinate to 1.
    """
    uvd = np.asarray(uvd, dtype=np.float64)
    depth = uvd[..., 2]
    if np.any(~(depth > 0.0)):
        raise DomainError("pixel depth must be positive")
    hom = np.stack([uvd[..., 0] * depth, uvd[..., 1] * depth, depth,
                    np.ones_like(depth)], axis=-1)
    out = hom @ cam.intrinsic_inv.T
    return out[..., :3] / out[..., 3:4]


def camera_to_lidar(xyz, cam):
    return _apply(cam.extrinsic_inv, np.asarray(xyz, dtype=np.float64))


def lidar_to_camera(xyz, cam):
    return _apply(cam.extrinsic, np.asarray(xyz, dtype=np.float64))


def camera_to_pixel(xyz, cam):
    """Project camera-frame points; raises BehindCameraError on depth <= 0."""
    xyz = np.asarray(xyz, dtype=np.float64)
    if np.any(~(xyz[..., 2] > 0.0)):
        raise BehindCameraError("point lies behind the camera")
    hom = np.concatenate([xyz, np.ones(xyz.shape[:-1] + (1,))], axis=-1) @ cam.intrinsic.T
    hom = hom[..., :3] / hom[..., 3:4]
    return np.stack([hom[..., 0] / hom[..., 2], hom[..., 1] / hom[..., 2], hom[..., 2]], axis=-1)


def lidar_to_pixel(xyz, cam):
    """LiDAR points to ``(u, v, depth)``; raises BehindCameraError."""
    return camera_to_pixel(lidar_to_camera(xyz, cam), cam)


def project_points(xyz, cam, min_depth=1e-6):
    """Non-raising variant of lidar_to_pixel for batches.

    Returns ``(uvd, valid)``; entries with depth <= ``min_depth`` are NaN
    and flagged invalid so callers can skip them.
    """
    cam_pts = lidar_to_camera(xyz, cam)
    valid = cam_pts[..., 2] > min_depth
    safe = np.where(valid[..., None], cam_pts, np.array([0.0, 0.0, 1.0]))
    uvd = camera_to_pixel(safe, cam)
    uvd[~valid] = np.nan
    return uvd, valid


@dataclass(frozen=True, eq=False)
class PerceptionRange:
    lo: tuple = (-50.0, -50.0, -5.0)
    hi: tuple = (50.0, 50.0, 3.0)

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise InvalidRangeError("range corners must be 3-vectors")
        if np.any(~(hi > lo)):
            raise InvalidRangeError(f"degenerate perception range {self.lo} .. {self.hi}")
        object.__setattr__(self, "lo", tuple(float(x) for x in lo))
        object.__setattr__(self, "hi", tuple(float(x) for x in hi))

    def __eq__(self, other):
        return isinstance(other, PerceptionRange) and self.lo == other.lo and self.hi == other.hi

    @property
    def extent(self):
        return np.asarray(self.hi) - np.asarray(self.lo)

    def contains(self, xyz):
        xyz = np.asarray(xyz)
        return np.all((xyz >= self.lo) & (xyz <= self.hi), axis=-1)

    def denormalize(self, norm):
        return np.asarray(self.lo) + np.asarray(norm) * self.extent


def normalize_center(xyz, rng=None):
    """Map LiDAR points into the unit cube of the perception range, clamped."""
    rng = PerceptionRange() if rng is None else rng
    lo = np.asarray(rng.lo)
    out = (np.asarray(xyz, dtype=np.float64) - lo) / (np.asarray(rng.hi) - lo)
    return np.clip(out, 0.0, 1.0)


def pixel_centers(height, width):
    """``(H, W, 2)`` array of pixel-center ``(u, v)`` = ``(n + 0.5, m + 0.5)``."""
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return np.stack([u, v], axis=-1)
