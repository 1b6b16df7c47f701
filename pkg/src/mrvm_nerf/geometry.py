"""Pinhole cameras, ray casting, world-to-image projection, bilinear sampling.

Conventions: camera frame is x-right, y-down, z-forward; the pose is a 3x4
camera-to-world transform. Integer pixel (u, v) lives at continuous image
coordinate (u + 0.5, v + 0.5), which makes project(unproject) exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

BEHIND_EPS = 1e-9


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray  # 3x4 camera-to-world [R | t]

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (3, 4):
            raise ValueError(f"pose must be 3x4, got {self.pose.shape}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        R = self.pose[:, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation has negative determinant")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:, :3]

    @property
    def center(self) -> np.ndarray:
        return self.pose[:, 3]

    @property
    def forward(self) -> np.ndarray:
        return self.pose[:, 2]

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "pose": [float(x) for x in self.pose.ravel()]}

    @staticmethod
    def from_json(d: dict) -> "Camera":
        return Camera(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                      np.asarray(d["pose"], dtype=np.float64).reshape(3, 4))


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not (0 < self.t_near < self.t_far):
            raise ValueError(f"need 0 < t_near < t_far, got {self.t_near}, {self.t_far}")

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


def pixel_directions(camera: Camera, px, py) -> np.ndarray:
    """World-space unit directions through pixels (px, py); vectorized."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    u = px + 0.5
    v = py + 0.5
    d_cam = np.stack([(u - camera.cx) / camera.fx,
                      (v - camera.cy) / camera.fy,
                      np.ones_like(u)], axis=-1)
    d_world = d_cam @ camera.rotation.T
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def ray_for_pixel(camera: Camera, px: float, py: float,
                  t_near: float = 1e-3, t_far: float = 1e3) -> Ray:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    d = pixel_directions(camera, px, py)
    return Ray(camera.center.copy(), d, t_near, t_far)


def project_points(camera: Camera, points: np.ndarray):
    """Project world points to (px, py, depth); depth <= 1e-9 means behind camera.

    Returns arrays shaped like points[..., 0]. Pixel coordinates are continuous
    (pixel-center convention); depth is z along the camera forward axis.
    """
    points = np.asarray(points, dtype=np.float64)
    rel = points - camera.center
    p_cam = rel @ camera.rotation  # R^T rel, row-vector form
    z = p_cam[..., 2]
    safe_z = np.where(np.abs(z) > BEHIND_EPS, z, 1.0)
    px = camera.fx * p_cam[..., 0] / safe_z + camera.cx
    py = camera.fy * p_cam[..., 1] / safe_z + camera.cy
    return px, py, z


def project_point(camera: Camera, point: np.ndarray):
    px, py, z = project_points(camera, np.asarray(point, dtype=np.float64))
    return float(px), float(py), float(z)


def bilinear_sample(grid, px, py) -> ad.Tensor:
    """Bilinear sample of an H x W x D grid at continuous coords; vectorized.

    Coordinates follow the pixel-center convention and are clamped to the
    border. Differentiable w.r.t. grid values when grid is a Tensor.
    """
    g = grid if isinstance(grid, ad.Tensor) else ad.Tensor(np.asarray(grid, dtype=np.float64))
    if g.value.ndim != 3 or g.value.size == 0:
        raise ValueError(f"grid must be non-empty H x W x D, got shape {g.value.shape}")
    H, W, _ = g.value.shape
    x = np.clip(np.asarray(px, dtype=np.float64) - 0.5, 0.0, W - 1.0)
    y = np.clip(np.asarray(py, dtype=np.float64) - 0.5, 0.0, H - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x0 = np.minimum(x0, W - 1)
    y0 = np.minimum(y0, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (x - x0)[..., None]
    wy = (y - y0)[..., None]
    g00 = g[(y0, x0)]
    g01 = g[(y0, x1)]
    g10 = g[(y1, x0)]
    g11 = g[(y1, x1)]
    top = g00 * (1.0 - wx) + g01 * wx
    bot = g10 * (1.0 - wx) + g11 * wx
    return top * (1.0 - wy) + bot * wy


def look_at(eye, target, up) -> np.ndarray:
    """Camera-to-world 3x4 pose with forward axis from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    f = target - eye
    nf = np.linalg.norm(f)
    if nf < 1e-12:
        raise ValueError("eye and target coincide")
    f = f / nf
    r = np.cross(f, up)
    nr = np.linalg.norm(r)
    if nr < 1e-9:
        raise ValueError("up vector is parallel to the view direction")
    r = r / nr
    d = np.cross(f, r)  # camera y points opposite world up
    R = np.stack([r, d, f], axis=1)
    return np.concatenate([R, eye[:, None]], axis=1)
