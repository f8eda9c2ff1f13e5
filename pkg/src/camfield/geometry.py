"""Cameras, rays and pinhole projection."""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world<-camera rigid pose.

    ``rotation`` maps camera-frame vectors to world frame; ``position`` is the
    camera center in world coordinates.  Camera frame: +x right (columns),
    +y down (rows), +z forward (optical axis).
    """

    id: str
    agent_id: str
    position: np.ndarray          # (3,) meters
    rotation: np.ndarray          # (3, 3) orthonormal, det +1
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        R = self.rotation
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-8):
            raise ValueError("rotation must be orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation must have determinant +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside image bounds")

    @property
    def optical_axis(self):
        return self.rotation[:, 2].copy()


def look_at_rotation(position, target, up=(0.0, 0.0, 1.0)):
    """World<-camera rotation for a camera at ``position`` looking at ``target``.

    Camera +z points toward the target, +x right, +y down (so ``up`` in world
    maps near -y in camera frame).
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - position
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("camera position and target coincide")
    fwd = fwd / n
    right = np.cross(fwd, up)
    n = np.linalg.norm(right)
    if n < 1e-9:
        # looking straight along up; pick an arbitrary right vector
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        n = np.linalg.norm(right)
    right = right / n
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


@dataclass
class Ray:
    """A ray o + u*d with its pixel provenance and a [near, far] interval."""

    origin: np.ndarray            # (3,)
    direction: np.ndarray         # (3,), unit
    near: float
    far: float
    pixel: tuple                  # (row, col)
    camera_id: str = ""
    time: float = 0.0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not (0.0 <= self.near < self.far):
            raise ValueError("require 0 <= near < far")


def pixel_directions(camera, rows, cols):
    """World-space unit directions through the given pixel centers.

    rows, cols : (N,) integer pixel indices.  Pixel centers sit at +0.5.
    Returns (N, 3) unit vectors.
    """
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    if np.any(rows < 0) or np.any(rows >= camera.height) or \
       np.any(cols < 0) or np.any(cols >= camera.width):
        raise ValueError("pixel outside image bounds")
    u = (cols + 0.5 - camera.cx) / camera.fx
    v = (rows + 0.5 - camera.cy) / camera.fy
    d_cam = np.stack([u, v, np.ones_like(u, dtype=np.float64)], axis=-1)
    d_world = d_cam @ camera.rotation.T
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def generate_rays(camera, pixels, near=0.05, far=100.0, time=0.0):
    """One Ray per (row, col) pixel, origin at the camera center."""
    pixels = list(pixels)
    rows = np.array([p[0] for p in pixels], dtype=np.int64)
    cols = np.array([p[1] for p in pixels], dtype=np.int64)
    dirs = pixel_directions(camera, rows, cols)
    return [
        Ray(origin=camera.position.copy(), direction=dirs[i], near=near, far=far,
            pixel=(int(rows[i]), int(cols[i])), camera_id=camera.id, time=time)
        for i in range(len(pixels))
    ]


def all_pixel_rays(camera, near=0.05, far=100.0, time=0.0):
    """Origins/directions for every pixel, batched.

    Returns (origins (H*W, 3), directions (H*W, 3)) in row-major pixel order.
    """
    rr, cc = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    dirs = pixel_directions(camera, rr.ravel(), cc.ravel())
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


def project(x3d, camera, eps=1e-9):
    """Pinhole projection of world points to (u, v) pixel coordinates.

    x3d : (..., 3) world points strictly in front of the camera.
    Returns (..., 2) with u along columns and v along rows.
    """
    x3d = np.asarray(x3d, dtype=np.float64)
    p_cam = (x3d - camera.position) @ camera.rotation
    z = p_cam[..., 2]
    if np.any(z <= eps):
        raise ValueError("point behind (or on) the camera plane")
    u = camera.fx * p_cam[..., 0] / z + camera.cx
    v = camera.fy * p_cam[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def project_with_grad(x3d, camera, eps=1e-9):
    """Projection plus its Jacobian d(u,v)/dx, shape (..., 2, 3)."""
    x3d = np.asarray(x3d, dtype=np.float64)
    R = camera.rotation
    p_cam = (x3d - camera.position) @ R
    x, y, z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
    if np.any(z <= eps):
        raise ValueError("point behind (or on) the camera plane")
    uv = np.stack([camera.fx * x / z + camera.cx,
                   camera.fy * y / z + camera.cy], axis=-1)
    # d(uv)/d(p_cam), then chain through p_cam = R^T (x - pos)
    zero = np.zeros_like(z)
    du = np.stack([camera.fx / z, zero, -camera.fx * x / z**2], axis=-1)
    dv = np.stack([zero, camera.fy / z, -camera.fy * y / z**2], axis=-1)
    J_cam = np.stack([du, dv], axis=-2)          # (..., 2, 3)
    J = J_cam @ R.T                              # d p_cam/dx = R^T
    return uv, J


def ray_box_interval(origins, directions, box_min, box_max):
    """[t0, t1] intersection of rays with an axis-aligned box (slab method).

    Returns (t0, t1) arrays; rays that miss get t0 > t1.
    """
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    d = np.where(np.abs(directions) < 1e-12,
                 np.where(directions < 0, -1e-12, 1e-12), directions)
    inv = 1.0 / d
    lo = (box_min - origins) * inv
    hi = (box_max - origins) * inv
    t0 = np.minimum(lo, hi).max(axis=-1)
    t1 = np.maximum(lo, hi).min(axis=-1)
    return t0, t1
