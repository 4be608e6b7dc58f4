"""Synthetic scene substrate: procedural shading, renderer, reconstruction
error injection, and a toy TSDF reconstructor.

The renderer sphere-traces a ground-truth analytic SDF and shades hits with
ambient + Lambert + a Phong lobe on the reflection direction, which gives a
controllable view-dependent factor. Depth images store ray-hit distance
(0 = miss).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .cameras import CameraView
from .sdf import AnalyticSdf, VoxelSdf
from .surface import ray_sphere_interval, sphere_trace_batch


@dataclass
class BoundingSphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.radius <= 0:
            raise ValueError("bounding sphere radius must be positive")


# ---------------------------------------------------------------------------
# procedural albedo textures


class AlbedoTexture:
    """Procedural RGB albedo over surface position."""

    def __init__(self, kind="checker", color_a=(0.9, 0.85, 0.8),
                 color_b=(0.15, 0.2, 0.3), frequency=3.0, seed=0):
        if kind not in ("solid", "checker", "noise"):
            raise ValueError(f"unknown albedo kind {kind!r}")
        self.kind = kind
        self.color_a = np.clip(np.asarray(color_a, dtype=np.float64), 0, 1)
        self.color_b = np.clip(np.asarray(color_b, dtype=np.float64), 0, 1)
        self.frequency = float(frequency)
        self.seed = int(seed)
        if kind == "noise":
            rng = np.random.default_rng(self.seed)
            n_waves = 6
            dirs = rng.normal(size=(n_waves, 3))
            dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
            self._wavevecs = dirs * (self.frequency
                                     * rng.uniform(0.6, 1.4, (n_waves, 1)))
            self._phases = rng.uniform(0, 2 * np.pi, (n_waves, 3))

    def eval(self, points) -> np.ndarray:
        pts = np.atleast_2d(points)
        if self.kind == "solid":
            return np.broadcast_to(self.color_a, (len(pts), 3)).copy()
        if self.kind == "checker":
            cells = np.floor(pts * self.frequency).sum(axis=-1)
            odd = np.mod(cells, 2.0) >= 1.0
            return np.where(odd[:, None], self.color_b, self.color_a)
        phase = 2 * np.pi * (pts @ self._wavevecs.T)
        mix = np.sin(phase[:, :, None] + self._phases[None]).mean(axis=1)
        mix = 0.5 + 0.5 * mix
        return self.color_a + (self.color_b - self.color_a) * mix

    def to_json(self):
        return {"kind": self.kind, "color_a": self.color_a.tolist(),
                "color_b": self.color_b.tolist(),
                "frequency": self.frequency, "seed": self.seed}

    @classmethod
    def from_json(cls, spec):
        return cls(**spec)


@dataclass
class Light:
    direction: np.ndarray   # unit, pointing from the surface toward the light
    intensity: np.ndarray   # RGB
    specular: bool = True   # whether the Phong lobe applies to this light

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        self.direction = d / np.linalg.norm(d)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)


@dataclass
class ShadingModel:
    albedo: AlbedoTexture
    lights: list
    ambient: np.ndarray = field(default_factory=lambda: np.full(3, 0.25))
    k_s: float = 0.0
    shininess: float = 16.0
    background: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def __post_init__(self):
        self.ambient = np.asarray(self.ambient, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float64)
        if self.k_s < 0:
            raise ValueError("specular weight k_s must be >= 0")
        if self.shininess < 1:
            raise ValueError("Phong shininess must be >= 1")

    def shade(self, points, normals, view_dirs) -> np.ndarray:
        """Radiance toward the viewer, clamped to [0,1].

        view_dirs point from the surface toward the camera. The specular
        term evaluates the Phong lobe on the reflection of the view
        direction about the normal, so for fixed geometry it is a function
        of that reflection direction alone.
        """
        pts = np.atleast_2d(points)
        n = np.atleast_2d(normals)
        v = np.atleast_2d(view_dirs)
        albedo = self.albedo.eval(pts)
        color = albedo * self.ambient[None]
        w_r = 2.0 * np.sum(n * v, axis=-1, keepdims=True) * n - v
        for light in self.lights:
            lam = np.maximum(n @ light.direction, 0.0)
            color += albedo * lam[:, None] * light.intensity[None]
            if self.k_s > 0 and light.specular:
                spec = np.maximum(w_r @ light.direction, 0.0) ** self.shininess
                color += self.k_s * spec[:, None] * light.intensity[None]
        return np.clip(color, 0.0, 1.0)

    def to_json(self):
        return {"albedo": self.albedo.to_json(),
                "lights": [{"direction": l.direction.tolist(),
                            "intensity": l.intensity.tolist(),
                            "specular": l.specular}
                           for l in self.lights],
                "ambient": self.ambient.tolist(),
                "specular": {"k_s": self.k_s, "shininess": self.shininess},
                "background": self.background.tolist()}

    @classmethod
    def from_json(cls, spec):
        spec = dict(spec)
        specular = spec.pop("specular", {})
        return cls(albedo=AlbedoTexture.from_json(spec["albedo"]),
                   lights=[Light(**l) for l in spec["lights"]],
                   ambient=spec.get("ambient", (0.25, 0.25, 0.25)),
                   k_s=specular.get("k_s", 0.0),
                   shininess=specular.get("shininess", 16.0),
                   background=spec.get("background", (0.5, 0.5, 0.5)))


# ---------------------------------------------------------------------------
# rendering


def _shade_rays(gt_sdf, shading, origins, dirs, bounding_sphere, eps,
                max_steps):
    """Trace + shade a ray bundle; returns (color (N,3), t (N,), hit (N,))."""
    if bounding_sphere is not None:
        t0, t1, clip_hit = ray_sphere_interval(origins, dirs,
                                               bounding_sphere.center,
                                               bounding_sphere.radius)
        t_near = np.where(clip_hit, t0, 0.0)
        t_far = np.where(clip_hit, t1, -1.0)  # empty interval -> miss
    else:
        t_near = np.zeros(len(dirs))
        t_far = np.full(len(dirs), 1e3)

    trace_mask = t_far > t_near
    t = np.zeros(len(dirs))
    status = np.zeros(len(dirs), dtype=np.int64)
    if trace_mask.any():
        idx = np.nonzero(trace_mask)[0]
        tt, st = sphere_trace_batch(gt_sdf, origins[idx], dirs[idx],
                                    t_near[idx], t_far[idx], eps=eps,
                                    max_steps=max_steps)
        t[idx] = tt
        status[idx] = st

    hit = status == _kernels.TRACE_HIT
    color = np.tile(shading.background, (len(dirs), 1))
    if hit.any():
        idx = np.nonzero(hit)[0]
        p = origins[idx] + t[idx, None] * dirs[idx]
        grad = gt_sdf.gradient(p)
        nrm = np.linalg.norm(grad, axis=-1, keepdims=True)
        normals = np.where(nrm > 1e-12, grad / np.maximum(nrm, 1e-12),
                           -dirs[idx])
        color[idx] = shading.shade(p, normals, -dirs[idx])
    return color, t, hit


def render_view(gt_sdf, shading: ShadingModel, cam: CameraView,
                bounding_sphere: Optional[BoundingSphere] = None,
                eps: float = 1e-4, max_steps: int = 512,
                aa: int = 2) -> CameraView:
    """Render image + depth by sphere tracing every pixel ray.

    Works for analytic and grid fields alike. Rays that miss the bounding
    sphere (when given) skip tracing entirely. Depth always comes from the
    pixel-center ray; with aa > 1 the color additionally averages an
    aa x aa subpixel grid, taming resampling noise at texture edges.
    """
    H, W = cam.height, cam.width
    origin = cam.center
    xs, ys = np.meshgrid(np.arange(W), np.arange(H))
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)

    dirs = cam.pixel_rays(pixels)
    origins = np.broadcast_to(origin, dirs.shape)
    image, depth, hit = _shade_rays(gt_sdf, shading, origins, dirs,
                                    bounding_sphere, eps, max_steps)
    depth = np.where(hit, depth, 0.0)

    if aa > 1:
        offs = (np.arange(aa) + 0.5) / aa - 0.5
        acc = image.copy()
        n_acc = 1
        for oy in offs:
            for ox in offs:
                if ox == 0.0 and oy == 0.0:
                    continue
                d2 = cam.pixel_rays(pixels + np.array([ox, oy]))
                c2, _, _ = _shade_rays(gt_sdf, shading, origins, d2,
                                       bounding_sphere, eps, max_steps)
                acc += c2
                n_acc += 1
        image = acc / n_acc

    out = CameraView(cam.id, cam.K, cam.R, cam.t, W, H,
                     image=image.reshape(H, W, 3).astype(np.float32),
                     depth=depth.reshape(H, W).astype(np.float64))
    return out


def render_views(gt_sdf, shading, cams, bounding_sphere=None, threads=None,
                 **kw):
    """Render a list of cameras; per-view work can run on a thread pool."""
    if threads and threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(
                lambda c: render_view(gt_sdf, shading, c, bounding_sphere, **kw),
                cams))
    return [render_view(gt_sdf, shading, c, bounding_sphere, **kw)
            for c in cams]


# ---------------------------------------------------------------------------
# reconstruction-error injection


@dataclass
class PerturbRegion:
    """Error-injection region.

    mode "signed" adds zero-mean noise; mode "bump" adds the squared noise
    (one-sided), which ties the injected surface tilt to the displacement
    magnitude so photometric error and positional error vanish together.
    """

    center: np.ndarray
    radius: float
    amplitude: float
    seed: int = 0
    mode: str = "signed"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.radius <= 0:
            raise ValueError("perturbation radius must be positive")
        if self.amplitude < 0:
            raise ValueError("perturbation amplitude must be >= 0")
        if self.mode not in ("signed", "bump"):
            raise ValueError(f"unknown perturbation mode {self.mode!r}")


def _band_limited_noise(pts, region: PerturbRegion, n_waves=5):
    """Smooth noise in [-1,1]: mean of random cosine waves, wavelengths on
    the order of the region radius."""
    rng = np.random.default_rng(region.seed)
    dirs = rng.normal(size=(n_waves, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    freqs = rng.uniform(0.5, 1.5, n_waves) / region.radius
    phases = rng.uniform(0, 2 * np.pi, n_waves)
    rel = pts - region.center
    args = 2 * np.pi * (rel @ (dirs * freqs[:, None]).T) + phases
    return np.cos(args).mean(axis=-1)


def perturb_sdf(src, regions, dims, bbox) -> VoxelSdf:
    """Sample src onto a grid and add cosine-falloff band-limited noise
    inside each region; untouched nodes equal the sampled source exactly."""
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    for r in regions:
        if np.any(r.center < bbox[0]) or np.any(r.center > bbox[1]):
            raise ValueError("perturbation region center outside bbox")
    grid = VoxelSdf.from_sampling(src, dims, bbox)
    if not regions:
        return grid
    pts = grid.node_coords()
    delta = np.zeros(len(pts))
    for region in regions:
        d = np.linalg.norm(pts - region.center, axis=-1)
        inside = d < region.radius
        if not inside.any():
            continue
        falloff = 0.5 * (1 + np.cos(np.pi * d[inside] / region.radius))
        noise = _band_limited_noise(pts[inside], region)
        if region.mode == "bump":
            noise = noise * noise
        delta[inside] += region.amplitude * falloff * noise
    grid.values = np.ascontiguousarray(
        (grid.values + delta.astype(np.float32).reshape(grid.dims, order="F")))
    return grid


# ---------------------------------------------------------------------------
# toy TSDF reconstructor


def tsdf_fuse(views, dims, bbox, truncation, depth_noise=0.0, seed=0) -> VoxelSdf:
    """Truncated signed distance fusion of posed depth maps.

    Uniform per-view weighting; unobserved voxels keep +truncation. With
    depth_noise > 0, seeded Gaussian noise is added to hit depths before
    fusion.
    """
    views = [v for v in views if v.depth is not None]
    if not views:
        raise ValueError("tsdf_fuse needs at least one view with depth")
    if truncation <= 0:
        raise ValueError("truncation must be positive")
    dims = tuple(int(d) for d in dims)
    if any(d < 2 for d in dims):
        raise ValueError("grid needs at least 2 nodes per axis")

    grid = VoxelSdf(dims, bbox, np.zeros(dims, dtype=np.float32))
    pts = np.ascontiguousarray(grid.node_coords())
    values_sum = np.zeros(len(pts))
    weight_sum = np.zeros(len(pts))
    rng = np.random.default_rng(seed)
    for view in views:
        depth = np.ascontiguousarray(view.depth, dtype=np.float64)
        if depth_noise > 0:
            noisy = depth + depth_noise * rng.standard_normal(depth.shape)
            depth = np.where(depth > 0, np.maximum(noisy, 1e-6), 0.0)
        _kernels.tsdf_accumulate(values_sum, weight_sum, pts, depth,
                                 view.K, view.R, view.t,
                                 view.width, view.height, truncation)
    fused = np.where(weight_sum > 0, values_sum / np.maximum(weight_sum, 1.0),
                     truncation)
    grid.values = np.ascontiguousarray(
        fused.astype(np.float32).reshape(dims, order="F"))
    return grid


# ---------------------------------------------------------------------------
# dataset


@dataclass
class SceneDataset:
    views: list
    gt_sdf: AnalyticSdf
    recon_sdf: Optional[VoxelSdf]
    bounding_sphere: BoundingSphere

    def view_by_id(self, vid) -> CameraView:
        for v in self.views:
            if v.id == vid:
                return v
        raise KeyError(f"no view with id {vid}")

    def check_depth_consistency(self, tol=1e-3, max_pixels=20000, seed=0):
        """|gt(hit point)| < tol for stored non-miss depths (subsampled)."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for view in self.views:
            if view.depth is None:
                continue
            d = view.depth.ravel()
            hits = np.nonzero(d > 0)[0]
            if len(hits) == 0:
                continue
            if len(hits) > max_pixels:
                hits = rng.choice(hits, max_pixels, replace=False)
            dirs = view.pixel_rays(np.stack([hits % view.width,
                                             hits // view.width],
                                            axis=-1).astype(np.float64))
            p = view.center[None] + d[hits, None] * dirs
            worst = max(worst, float(np.abs(self.gt_sdf.eval(p)).max()))
        return worst < tol, worst

    def check_frusta(self) -> bool:
        """Every view frustum intersects the bounding sphere."""
        c, r = self.bounding_sphere.center, self.bounding_sphere.radius
        for view in self.views:
            cc = view.R @ c + view.t
            if cc[2] + r <= 0:
                return False
            corners = np.array([[0.0, 0.0], [view.width - 1.0, 0.0],
                                [view.width - 1.0, view.height - 1.0],
                                [0.0, view.height - 1.0]])
            fx, fy = view.K[0, 0], view.K[1, 1]
            cx, cy = view.K[0, 2], view.K[1, 2]
            rays = np.stack([(corners[:, 0] - cx) / fx,
                             (corners[:, 1] - cy) / fy,
                             np.ones(4)], axis=-1)
            for i in range(4):
                n = np.cross(rays[i], rays[(i + 1) % 4])
                n /= np.linalg.norm(n)
                if np.dot(n, cc) < -r:
                    return False
        return True
