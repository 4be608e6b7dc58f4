"""Pinhole cameras: intrinsics, world-to-camera poses, rigs on a sphere.

Conventions: camera frame has x right, y down, z forward; a world point X
maps to camera coordinates R @ X + t and to the image via K. Pixel (u, v)
addresses the sample point at exactly (u, v) in K's pixel units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ROTATION_TOL = 1e-9


@dataclass
class CameraView:
    id: int
    K: np.ndarray                 # 3x3 intrinsics
    R: np.ndarray                 # 3x3 world-to-camera rotation
    t: np.ndarray                 # 3 world-to-camera translation
    width: int
    height: int
    image: Optional[np.ndarray] = None   # (H,W,3) float in [0,1]
    depth: Optional[np.ndarray] = None   # (H,W) ray-hit distance, 0 = miss

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=ROTATION_TOL):
            raise ValueError(f"view {self.id}: R is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > ROTATION_TOL:
            raise ValueError(f"view {self.id}: det(R) != 1")
        fx, fy = self.K[0, 0], self.K[1, 1]
        cx, cy = self.K[0, 2], self.K[1, 2]
        if fx <= 0 or fy <= 0:
            raise ValueError(f"view {self.id}: focal lengths must be positive")
        if not (0 <= cx < self.width and 0 <= cy < self.height):
            raise ValueError(f"view {self.id}: principal point outside image")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def project(self, points):
        """Project (N,3) world points; returns (N,2) pixels and (N,) cam z."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        pc = pts @ self.R.T + self.t
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.K[0, 0] * pc[:, 0] / z + self.K[0, 2]
            v = self.K[1, 1] * pc[:, 1] / z + self.K[1, 2]
        return np.stack([u, v], axis=-1), z

    def pixel_rays(self, pixels=None):
        """World-space unit ray directions through pixel coords (N,2).

        With pixels=None, returns directions for the full image grid in
        row-major order (pixel (x,y) at index y*width + x).
        """
        if pixels is None:
            xs, ys = np.meshgrid(np.arange(self.width), np.arange(self.height))
            pixels = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        fx, fy = self.K[0, 0], self.K[1, 1]
        cx, cy = self.K[0, 2], self.K[1, 2]
        d = np.stack([(pixels[:, 0] - cx) / fx,
                      (pixels[:, 1] - cy) / fy,
                      np.ones(len(pixels))], axis=-1)
        d = d @ self.R  # R^T applied row-wise
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def without_images(self) -> "CameraView":
        return CameraView(self.id, self.K, self.R, self.t, self.width,
                          self.height)


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera [R|t] for a camera at `eye` looking at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-8:
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    # orthonormalize against accumulated rounding so the invariant check holds
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    t = -R @ eye
    return R, t


def intrinsics_from_fov(width, height, fov_deg):
    """Square-pixel K with the given horizontal field of view."""
    fx = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return np.array([[fx, 0.0, width / 2.0],
                     [0.0, fx, height / 2.0],
                     [0.0, 0.0, 1.0]])


def fibonacci_directions(n, polar_margin=0.25):
    """n roughly-even unit directions, poles trimmed by `polar_margin`.

    The margin keeps z in [-1+m, 1-m] so look_at never degenerates and
    latitude bands for region partitioning stay populated.
    """
    i = np.arange(n)
    z = (1 - polar_margin) * (1 - 2 * (i + 0.5) / n)
    golden = np.pi * (3 - np.sqrt(5))
    theta = golden * i
    r = np.sqrt(1 - z * z)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=-1)


def make_camera_rig(count, center, distance, width, height, fov_deg,
                    distribution="fibonacci") -> list[CameraView]:
    """Cameras on a sphere of `distance` around `center`, all looking inward."""
    center = np.asarray(center, dtype=np.float64)
    if distribution == "fibonacci":
        dirs = fibonacci_directions(count)
    elif distribution == "ring":
        phi = 2 * np.pi * np.arange(count) / count
        dirs = np.stack([np.cos(phi), np.sin(phi),
                         np.full(count, 0.35)], axis=-1)
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    else:
        raise ValueError(f"unknown rig distribution {distribution!r}")
    K = intrinsics_from_fov(width, height, fov_deg)
    views = []
    for i, d in enumerate(dirs):
        R, t = look_at(center + distance * d, center)
        views.append(CameraView(i, K, R, t, width, height))
    return views


def relative_transform(ref: CameraView, src: CameraView):
    """[R_rel | t_rel] mapping ref-camera coordinates to src-camera coordinates."""
    R_rel = src.R @ ref.R.T
    t_rel = src.t - R_rel @ ref.t
    return R_rel, t_rel
