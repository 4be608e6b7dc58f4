"""Ray-surface intersection on SDF fields.

Two retrieval methods: uniform sampling with linear interpolation at the
first outside-to-inside sign change, and sphere tracing. Both return surface
points with normals taken from the SDF gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .sdf import TrilinearGrid

DEGENERATE_GRAD_NORM = 1e-6


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit
    t_range: tuple = (0.0, 10.0)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.t_range[0] < self.t_range[1]:
            raise ValueError("ray t_range must satisfy t_near < t_far")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass
class SurfacePoint:
    position: np.ndarray
    normal: np.ndarray
    t: float
    residual: float
    view_id: Optional[int] = None
    degenerate_normal: bool = False
    step_limit_hit: bool = False


def sdf_gradient(field, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the field at x (single point).

    Grid fields default to half-voxel steps unless h is passed explicitly;
    a degenerate (zero) gradient is returned as-is for the caller to handle.
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    if isinstance(field, TrilinearGrid):
        return field.gradient(x, h=h)[0]
    return field.gradient(x, h=h)[0]


def _normals_from_gradient(field, pts, dirs):
    """Unit normals at surface points; degenerate gradients fall back to -dir."""
    if isinstance(field, TrilinearGrid):
        grad = field.gradient(pts)
    else:
        grad = field.gradient(pts, h=1e-5)
    norm = np.linalg.norm(grad, axis=-1)
    degenerate = norm < DEGENERATE_GRAD_NORM
    normals = np.where(degenerate[:, None], -dirs,
                       grad / np.maximum(norm, DEGENERATE_GRAD_NORM)[:, None])
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    return normals, degenerate


def find_zero_crossing_batch(field, origins, dirs, t_near, t_far,
                             n_samples: int = 128):
    """Vectorized sampling-based root finding over a ray batch.

    Samples the field at n_samples uniform ts per ray and linearly
    interpolates the first s_i > 0, s_{i+1} < 0 pair. Returns (t, hit_mask).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    B = len(origins)
    steps = np.linspace(0.0, 1.0, n_samples)
    ts = t_near[:, None] + (t_far - t_near)[:, None] * steps[None, :]
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    s = field.eval(pts.reshape(-1, 3)).reshape(B, n_samples)

    entering = (s[:, :-1] > 0) & (s[:, 1:] < 0)
    hit = entering.any(axis=1)
    first = np.argmax(entering, axis=1)
    i = first
    si = s[np.arange(B), i]
    sj = s[np.arange(B), i + 1]
    ti = ts[np.arange(B), i]
    tj = ts[np.arange(B), i + 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_star = (si * tj - sj * ti) / (si - sj)
    t_star = np.where(hit, t_star, np.nan)
    return t_star, hit


def sphere_trace_batch(field, origins, dirs, t_near, t_far,
                       eps: float = 1e-4, max_steps: int = 256,
                       omega: float = 1.0):
    """Batched sphere tracing; returns (t, status) with status codes from
    _kernels (0 miss, 1 hit, 2 step budget exhausted).

    Over-relaxation omega is clamped to 1 on grid fields, which are not
    guaranteed to be metric after perturbation or fusion.
    """
    if eps <= 0 or max_steps < 1:
        raise ValueError("need eps > 0 and max_steps >= 1")
    if not 1.0 <= omega <= 1.6:
        raise ValueError("omega must lie in [1, 1.6]")
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    t_near = np.ascontiguousarray(np.broadcast_to(
        np.asarray(t_near, dtype=np.float64), (len(origins),)))
    t_far = np.ascontiguousarray(np.broadcast_to(
        np.asarray(t_far, dtype=np.float64), (len(origins),)))

    if isinstance(field, TrilinearGrid):
        omega_eff = 1.0
        out_t = np.empty(len(origins))
        out_status = np.empty(len(origins), dtype=np.int64)
        _kernels.sphere_trace_grid(field.values, field.bbox[0],
                                   field._inv_spacing, origins, dirs,
                                   t_near, t_far, eps, max_steps, omega_eff,
                                   field.add_outside_distance, out_t,
                                   out_status)
        return out_t, out_status

    # analytic field: masked numpy marching
    B = len(origins)
    t = t_near.copy()
    status = np.full(B, _kernels.TRACE_EXHAUSTED, dtype=np.int64)
    active = t <= t_far
    status[~active] = _kernels.TRACE_MISS
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        p = origins[idx] + t[idx, None] * dirs[idx]
        f = field.eval(p)
        hit = np.abs(f) < eps
        status[idx[hit]] = _kernels.TRACE_HIT
        active[idx[hit]] = False
        adv = ~hit
        t[idx[adv]] += omega * f[adv]
        out = t[idx] > t_far[idx]
        out |= t[idx] < t_near[idx]
        out &= active[idx]
        status[idx[out]] = _kernels.TRACE_MISS
        active[idx[out]] = False
    return t, status


def _make_surface_point(field, ray: Ray, t: float, view_id, step_limit=False):
    p = ray.at(float(t))
    normals, degenerate = _normals_from_gradient(
        field, p.reshape(1, 3), ray.direction.reshape(1, 3))
    residual = abs(field.eval_one(p))
    return SurfacePoint(position=p, normal=normals[0], t=float(t),
                        residual=residual, view_id=view_id,
                        degenerate_normal=bool(degenerate[0]),
                        step_limit_hit=step_limit)


def find_zero_crossing(field, ray: Ray, n_samples: int = 128,
                       view_id: Optional[int] = None) -> Optional[SurfacePoint]:
    """Locate the first outside-to-inside crossing along the ray, or None."""
    t, hit = find_zero_crossing_batch(
        field, ray.origin[None], ray.direction[None],
        np.array([ray.t_range[0]]), np.array([ray.t_range[1]]),
        n_samples=n_samples)
    if not hit[0]:
        return None
    return _make_surface_point(field, ray, t[0], view_id)


def sphere_trace(field, ray: Ray, eps: float = 1e-4, max_steps: int = 256,
                 omega: float = 1.0,
                 view_id: Optional[int] = None) -> Optional[SurfacePoint]:
    """Sphere trace along the ray; None on miss (step exhaustion included)."""
    t, status = sphere_trace_batch(
        field, ray.origin[None], ray.direction[None],
        ray.t_range[0], ray.t_range[1], eps=eps, max_steps=max_steps,
        omega=omega)
    if status[0] != _kernels.TRACE_HIT:
        return None
    return _make_surface_point(field, ray, t[0], view_id,
                               step_limit=status[0] == _kernels.TRACE_EXHAUSTED)


def batch_surface_points(field, origins, dirs, t_near, t_far, method="sample",
                         n_samples=128, eps=1e-4, max_steps=256):
    """Intersect a ray batch and fetch positions/normals in bulk.

    Returns dict of arrays: positions (N,3), normals (N,3), t (N,),
    residual (N,), hit (N,) bool, degenerate (N,) bool. Misses carry NaNs.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    if method == "sample":
        t, hit = find_zero_crossing_batch(field, origins, dirs, t_near, t_far,
                                          n_samples=n_samples)
    elif method == "trace":
        t, status = sphere_trace_batch(field, origins, dirs, t_near, t_far,
                                       eps=eps, max_steps=max_steps)
        hit = status == _kernels.TRACE_HIT
        t = np.where(hit, t, np.nan)
    else:
        raise ValueError(f"unknown intersection method {method!r}")

    B = len(origins)
    positions = np.full((B, 3), np.nan)
    normals = np.full((B, 3), np.nan)
    residual = np.full(B, np.nan)
    degenerate = np.zeros(B, dtype=bool)
    if hit.any():
        idx = np.nonzero(hit)[0]
        p = origins[idx] + t[idx, None] * dirs[idx]
        nrm, dgn = _normals_from_gradient(field, p, dirs[idx])
        positions[idx] = p
        normals[idx] = nrm
        residual[idx] = np.abs(field.eval(p))
        degenerate[idx] = dgn
    return {"positions": positions, "normals": normals, "t": t,
            "residual": residual, "hit": hit, "degenerate": degenerate}


def ray_sphere_interval(origins, dirs, center, radius):
    """Entry/exit ts of rays against a sphere; miss -> hit=False.

    Negative entry times clamp to 0 (origin inside the sphere).
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    oc = origins - np.asarray(center, dtype=np.float64)
    b = np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc >= 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = np.maximum(-b - sq, 0.0)
    t1 = -b + sq
    hit &= t1 > 0
    return t0, t1, hit
