"""Patch-based multi-view photometric consistency.

A surface point with its normal defines a tangent plane; the plane induces a
homography between a reference view and each source view. K x K grayscale
patches are warped through it, compared with single-window SSIM, and the
best (lowest) pair scores are averaged into a per-point pseudo label in
[0, 2].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .cameras import CameraView, relative_transform
from .sdf import TrilinearGrid
from .surface import batch_surface_points, ray_sphere_interval

DEGENERATE_PLANE_D = 1e-9
HOMOGENEOUS_W_MIN = 1e-12


class DegeneratePlaneError(ValueError):
    """Tangent plane passes through the reference camera center."""


def to_gray(image) -> np.ndarray:
    """Rec.709 luma of an RGB image (channels in [0,1])."""
    img = np.asarray(image, dtype=np.float64)
    return img[..., 0] * 0.2126 + img[..., 1] * 0.7152 + img[..., 2] * 0.0722


@dataclass
class TangentPlane:
    normal: np.ndarray  # unit, world frame
    point: np.ndarray   # on-plane point, world frame
    d: float            # offset with normal . point + d = 0

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        self.point = np.asarray(self.point, dtype=np.float64).reshape(3)


def tangent_plane(sp) -> TangentPlane:
    """Local plane at a surface point: d = -n . p."""
    n = np.asarray(sp.normal, dtype=np.float64)
    p = np.asarray(sp.position, dtype=np.float64)
    return TangentPlane(normal=n, point=p, d=float(-n @ p))


@dataclass
class PatchGrid:
    """Pixel coordinates of a K x K patch with per-coordinate validity."""

    coords: np.ndarray  # (K*K, 2) x=col, y=row
    valid: np.ndarray   # (K*K,) bool
    size: int

    @property
    def center(self):
        return self.coords[len(self.coords) // 2]


def patch_offsets(size: int) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError("patch size must be odd and >= 1")
    half = size // 2
    ys, xs = np.mgrid[-half:half + 1, -half:half + 1]
    return np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)


def make_patch_grid(center_xy, size: int, width: int, height: int) -> PatchGrid:
    coords = np.asarray(center_xy, dtype=np.float64) + patch_offsets(size)
    valid = ((coords[:, 0] >= 0) & (coords[:, 0] <= width - 1)
             & (coords[:, 1] >= 0) & (coords[:, 1] <= height - 1))
    return PatchGrid(coords=coords, valid=valid, size=size)


def homography(plane: TangentPlane, ref: CameraView, src: CameraView) -> np.ndarray:
    """3x3 map sending ref pixels of plane points to src pixels.

    H = K_src (R_rel - t_rel n_ref^T / d_ref) K_ref^-1 with the plane
    expressed in the reference camera frame.
    """
    n_ref = ref.R @ plane.normal
    p_ref = ref.R @ plane.point + ref.t
    d_ref = float(-n_ref @ p_ref)
    if abs(d_ref) < DEGENERATE_PLANE_D:
        raise DegeneratePlaneError(
            "tangent plane passes through the reference camera center")
    R_rel, t_rel = relative_transform(ref, src)
    M = R_rel - np.outer(t_rel, n_ref) / d_ref
    return src.K @ M @ np.linalg.inv(ref.K)


def warp_patch(H, patch: PatchGrid, width: int, height: int) -> PatchGrid:
    """Apply H homogeneously; marks near-infinity and out-of-bounds invalid."""
    hom = np.concatenate([patch.coords, np.ones((len(patch.coords), 1))],
                         axis=-1)
    warped = hom @ np.asarray(H, dtype=np.float64).T
    w = warped[:, 2]
    finite = np.abs(w) > HOMOGENEOUS_W_MIN
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = warped[:, :2] / w[:, None]
    in_bounds = ((xy[:, 0] >= 0) & (xy[:, 0] <= width - 1)
                 & (xy[:, 1] >= 0) & (xy[:, 1] <= height - 1))
    valid = patch.valid & finite & in_bounds
    xy = np.where(finite[:, None], xy, 0.0)
    return PatchGrid(coords=xy, valid=valid, size=patch.size)


def sample_patch(gray, patch: PatchGrid):
    """Bilinear samples at valid coordinates; returns (values, valid_fraction).

    Invalid coordinates yield NaN and are excluded from the fraction.
    """
    gray = np.ascontiguousarray(gray, dtype=np.float64)
    out = np.empty(len(patch.coords))
    _kernels.bilinear_sample(gray, np.ascontiguousarray(patch.coords), out)
    out[~patch.valid] = np.nan
    return out, float(patch.valid.mean())


def ssim(a, b, L: float = 1.0, c1: Optional[float] = None,
         c2: Optional[float] = None) -> float:
    """Single-window SSIM over two equally sized patches (flattened)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("patches must have identical shape")
    return float(_ssim_rows(a[None], b[None], L=L, c1=c1, c2=c2)[0])


def _ssim_rows(a, b, L=1.0, c1=None, c2=None):
    """Row-wise SSIM for (B, n) stacks of flattened patches."""
    c1 = (0.01 * L) ** 2 if c1 is None else c1
    c2 = (0.03 * L) ** 2 if c2 is None else c2
    n = a.shape[1]
    mu_a = a.mean(axis=1)
    mu_b = b.mean(axis=1)
    da = a - mu_a[:, None]
    db = b - mu_b[:, None]
    denom = max(n - 1, 1)
    var_a = np.einsum("ij,ij->i", da, da) / denom
    var_b = np.einsum("ij,ij->i", db, db) / denom
    cov = np.einsum("ij,ij->i", da, db) / denom
    return (((2 * mu_a * mu_b + c1) * (2 * cov + c2))
            / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))


@dataclass
class PairScore:
    ref_id: int
    src_id: int
    score: float            # 1 - SSIM in [0, 2]
    valid: bool = True


@dataclass
class PseudoLabel:
    position: np.ndarray
    score: float            # aggregated consistency G in [0, 2]
    count: int              # contributing pair count
    view_id: Optional[int] = None


def aggregate(scores, k_best: int = 4):
    """Mean of the min(k_best, n) lowest valid pair scores, or None."""
    vals = sorted(s.score for s in scores if s.valid)
    if not vals:
        return None
    chosen = vals[:min(k_best, len(vals))]
    return float(np.mean(chosen)), len(chosen)


@dataclass
class ConsistencyConfig:
    patch_size: int = 11
    k_best: int = 4
    occlusion_test: bool = True
    occlusion_slack: Optional[float] = None  # None -> from voxel spacing
    max_src_views: Optional[int] = None
    min_cos_facing: float = 0.05
    intersection: str = "sample"   # "sample" (root finding) or "trace"
    n_samples: int = 128
    trace_eps: float = 1e-4
    trace_max_steps: int = 256

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch size must be odd and >= 1")
        if self.k_best < 1:
            raise ValueError("k_best must be >= 1")


class LabelGenerator:
    """Batch pseudo-label machinery over a dataset and a geometry field.

    Precomputes grayscale images and per-view constants; labels_for_pixels
    runs the full project/warp/score/aggregate pipeline vectorized over a
    (ref view, pixel) batch. Pass `images` to score against substitute
    (e.g. view-dependence-removed) images.
    """

    def __init__(self, ds, geometry, cfg: ConsistencyConfig, images=None):
        self.ds = ds
        self.geometry = geometry
        self.cfg = cfg
        self.views = list(ds.views)
        self.index_of = {v.id: i for i, v in enumerate(self.views)}
        if images is None:
            self.gray = [np.ascontiguousarray(to_gray(v.image))
                         for v in self.views]
        else:
            self.gray = [np.ascontiguousarray(to_gray(images[v.id]))
                         for v in self.views]
        self.centers = np.stack([v.center for v in self.views])
        self.K_inv = [np.linalg.inv(v.K) for v in self.views]
        self.sphere = ds.bounding_sphere
        if cfg.occlusion_slack is not None:
            self.occlusion_slack = cfg.occlusion_slack
        elif isinstance(geometry, TrilinearGrid):
            self.occlusion_slack = 2.5 * float(geometry.spacing.max())
        else:
            self.occlusion_slack = 0.05
        self._offsets = patch_offsets(cfg.patch_size)
        self._src_order = self._rank_sources()
        self.counters = {"rays": 0, "hits": 0, "labels": 0,
                         "dropped_margin": 0, "dropped_no_pairs": 0}

    def _rank_sources(self):
        """Per ref view: source view indices ordered by viewing-angle
        proximity, optionally truncated to max_src_views."""
        dirs = self.centers - self.sphere.center[None]
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        cos = dirs @ dirs.T
        order = {}
        for i in range(len(self.views)):
            others = [j for j in range(len(self.views)) if j != i]
            others.sort(key=lambda j: (-cos[i, j], self.views[j].id))
            if self.cfg.max_src_views is not None:
                others = others[:self.cfg.max_src_views]
            order[i] = others
        return order

    def intersect(self, view_idx_per_ray, pixels):
        """Ray-surface intersection for (view index, pixel) pairs."""
        origins = self.centers[view_idx_per_ray]
        dirs = np.empty((len(pixels), 3))
        for vi in np.unique(view_idx_per_ray):
            sel = view_idx_per_ray == vi
            dirs[sel] = self.views[vi].pixel_rays(pixels[sel])
        t0, t1, sph_hit = ray_sphere_interval(origins, dirs,
                                              self.sphere.center,
                                              self.sphere.radius)
        t0 = np.where(sph_hit, t0, 0.0)
        t1 = np.where(sph_hit, t1, 1e-6)
        res = batch_surface_points(
            self.geometry, origins, dirs, t0, t1,
            method=self.cfg.intersection, n_samples=self.cfg.n_samples,
            eps=self.cfg.trace_eps, max_steps=self.cfg.trace_max_steps)
        res["hit"] &= sph_hit
        return res, dirs

    def labels_for_pixels(self, view_ids, pixels):
        """Pseudo labels for rays cast through (view id, pixel) pairs.

        Returns dict of arrays: positions (N,3), scores (N,), counts (N,),
        view_ids (N,), pixels (N,2), processed in (view id, pixel index)
        order.
        """
        view_ids = np.asarray(view_ids, dtype=np.int64)
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        # deterministic processing order
        lin = pixels[:, 1] * 10 ** 6 + pixels[:, 0]
        order = np.lexsort((lin, view_ids))
        view_ids = view_ids[order]
        pixels = pixels[order]
        vidx = np.array([self.index_of[v] for v in view_ids], dtype=np.int64)

        self.counters["rays"] += len(pixels)
        res, ray_dirs = self.intersect(vidx, pixels)
        hit = res["hit"]
        self.counters["hits"] += int(hit.sum())
        out = {"positions": np.zeros((0, 3)), "scores": np.zeros(0),
               "counts": np.zeros(0, dtype=np.int64),
               "view_ids": np.zeros(0, dtype=np.int64),
               "pixels": np.zeros((0, 2))}
        if not hit.any():
            return out

        half = self.cfg.patch_size // 2
        keep = hit.copy()
        for vi in np.unique(vidx):
            v = self.views[vi]
            sel = vidx == vi
            margin_ok = ((pixels[:, 0] >= half) & (pixels[:, 0] <= v.width - 1 - half)
                         & (pixels[:, 1] >= half) & (pixels[:, 1] <= v.height - 1 - half))
            keep[sel] &= margin_ok[sel]
        self.counters["dropped_margin"] += int((hit & ~keep).sum())
        if not keep.any():
            return out

        idx = np.nonzero(keep)[0]
        positions = res["positions"][idx]
        normals = res["normals"][idx]
        vidx_k = vidx[idx]
        pix_k = pixels[idx]

        scores_all = []
        valid_all = []
        for vi in np.unique(vidx_k):
            sel = np.nonzero(vidx_k == vi)[0]
            s, v = self._pair_scores_for_ref(
                int(vi), positions[sel], normals[sel], pix_k[sel])
            scores_all.append((sel, s, v))

        n_src_max = max(s.shape[1] for _, s, _ in scores_all)
        scores = np.full((len(idx), n_src_max), np.inf)
        valid = np.zeros((len(idx), n_src_max), dtype=bool)
        for sel, s, v in scores_all:
            scores[sel, :s.shape[1]] = np.where(v, s, np.inf)
            valid[sel, :s.shape[1]] = v

        counts = valid.sum(axis=1)
        has_pairs = counts > 0
        self.counters["dropped_no_pairs"] += int((~has_pairs).sum())
        if not has_pairs.any():
            return out

        k = self.cfg.k_best
        sorted_scores = np.sort(scores, axis=1)
        take = np.minimum(counts, k)
        cums = np.cumsum(np.where(np.isfinite(sorted_scores), sorted_scores, 0.0),
                         axis=1)
        g = np.where(has_pairs,
                     cums[np.arange(len(idx)), np.maximum(take, 1) - 1]
                     / np.maximum(take, 1),
                     np.nan)

        sel = np.nonzero(has_pairs)[0]
        self.counters["labels"] += len(sel)
        return {"positions": positions[sel], "scores": g[sel],
                "counts": np.minimum(counts[sel], k).astype(np.int64),
                "view_ids": np.array([self.views[v].id for v in vidx_k[sel]],
                                     dtype=np.int64),
                "pixels": pix_k[sel]}

    def _pair_scores_for_ref(self, ref_idx, positions, normals, center_px):
        """Scores of all configured src views for points of one ref view.

        Returns (scores (B, n_src), valid (B, n_src)).
        """
        ref = self.views[ref_idx]
        B = len(positions)
        src_list = self._src_order[ref_idx]
        scores = np.zeros((B, len(src_list)))
        valid = np.zeros((B, len(src_list)), dtype=bool)

        # plane in ref camera frame, shared across src views
        n_ref = normals @ ref.R.T
        p_ref = positions @ ref.R.T + ref.t
        d_ref = -np.einsum("ij,ij->i", n_ref, p_ref)
        plane_ok = np.abs(d_ref) >= DEGENERATE_PLANE_D
        front_ref = p_ref[:, 2] > 0

        ref_coords = np.ascontiguousarray(
            center_px[:, None, :] + self._offsets[None])
        ref_patch = self._sample_rows(self.gray[ref_idx], ref_coords)

        n_over_d = n_ref / np.where(plane_ok, d_ref, 1.0)[:, None]
        K2 = ref_coords.shape[1]
        src_vals = np.empty((B, K2))
        warp_ok = np.empty(B, dtype=np.bool_)
        s = np.empty(B)
        c1 = (0.01) ** 2
        c2 = (0.03) ** 2
        for j, src_idx in enumerate(src_list):
            src = self.views[src_idx]
            R_rel, t_rel = relative_transform(ref, src)
            M = R_rel[None] - t_rel[None, :, None] * n_over_d[:, None, :]
            H = np.matmul(np.matmul(src.K[None], M), self.K_inv[ref_idx][None])

            _kernels.warp_sample_patches(self.gray[src_idx],
                                         np.ascontiguousarray(H), ref_coords,
                                         src.width, src.height, src_vals,
                                         warp_ok)
            pair_ok = plane_ok & front_ref & warp_ok

            # source-side geometric checks
            to_src = self.centers[src_idx][None] - positions
            dist = np.linalg.norm(to_src, axis=-1)
            to_src_n = to_src / np.maximum(dist, 1e-12)[:, None]
            facing = np.einsum("ij,ij->i", normals, to_src_n) > self.cfg.min_cos_facing
            p_src_z = (positions @ src.R.T + src.t)[:, 2]
            pair_ok &= facing & (p_src_z > 0)

            if self.cfg.occlusion_test and pair_ok.any():
                occluded = self._occluded(src_idx, positions, dist, to_src_n,
                                          pair_ok)
                pair_ok &= ~occluded

            if not pair_ok.any():
                continue
            _kernels.ssim_rows_kernel(ref_patch, src_vals, c1, c2, s)
            scores[:, j] = 1.0 - s
            valid[:, j] = pair_ok
        return scores, valid

    def _occluded(self, src_idx, positions, dist, to_src_n, mask):
        """Trace from the src camera toward each point; a hit more than
        `occlusion_slack` before the point means something blocks it."""
        occ = np.zeros(len(positions), dtype=bool)
        idx = np.nonzero(mask)[0]
        if len(idx) == 0:
            return occ
        cam = self.centers[src_idx]
        origins = np.broadcast_to(cam, (len(idx), 3))
        dirs = -to_src_n[idx]
        t_far = dist[idx] - self.occlusion_slack
        t0, _, sph_hit = ray_sphere_interval(origins, dirs,
                                             self.sphere.center,
                                             self.sphere.radius)
        t_near = np.where(sph_hit, t0, 0.0)
        trace_ok = t_far > t_near
        if not trace_ok.any():
            return occ
        from .surface import sphere_trace_batch
        sub = np.nonzero(trace_ok)[0]
        t, status = sphere_trace_batch(
            self.geometry, origins[sub], dirs[sub], t_near[sub], t_far[sub],
            eps=self.cfg.trace_eps, max_steps=64)
        blocked = status != _kernels.TRACE_MISS  # hit or exhausted
        occ[idx[sub]] = blocked
        return occ

    def _sample_rows(self, gray, coords):
        """Bilinear sample (B, n, 2) coords -> (B, n) values."""
        B, n, _ = coords.shape
        out = np.empty(B * n)
        _kernels.bilinear_sample(gray,
                                 np.ascontiguousarray(coords.reshape(-1, 2)),
                                 out)
        return out.reshape(B, n)


def pair_consistency(sp, ref: CameraView, src: CameraView,
                     patch_size: int = 11, occlusion_field=None,
                     cfg: Optional[ConsistencyConfig] = None) -> PairScore:
    """Score one (surface point, ref, src) pair: 1 - SSIM of warped patches.

    Invalid when the point misses the margin-inset reference image, the
    warped patch leaves the source image, the plane degenerates, the point
    lies behind either camera, or (with occlusion_field) the point is
    blocked in src.
    """
    cfg = cfg or ConsistencyConfig(patch_size=patch_size)
    invalid = PairScore(ref.id, src.id, np.nan, valid=False)

    pos = np.asarray(sp.position, dtype=np.float64)
    px, z = ref.project(pos)
    if z[0] <= 0:
        return invalid
    half = cfg.patch_size // 2
    x, y = px[0]
    if not (half <= x <= ref.width - 1 - half and half <= y <= ref.height - 1 - half):
        return invalid
    _, z_src = src.project(pos)
    if z_src[0] <= 0:
        return invalid

    plane = tangent_plane(sp)
    try:
        H = homography(plane, ref, src)
    except DegeneratePlaneError:
        return invalid

    patch = make_patch_grid(px[0], cfg.patch_size, ref.width, ref.height)
    warped = warp_patch(H, patch, src.width, src.height)
    if not warped.valid.all():
        return invalid

    if occlusion_field is not None and cfg.occlusion_test and src.id != ref.id:
        from .surface import sphere_trace_batch
        to_src = src.center - pos
        dist = float(np.linalg.norm(to_src))
        d = to_src / dist
        if np.dot(sp.normal, d) <= cfg.min_cos_facing:
            return invalid
        slack = cfg.occlusion_slack
        if slack is None:
            slack = (2.5 * float(occlusion_field.spacing.max())
                     if isinstance(occlusion_field, TrilinearGrid) else 0.05)
        t_far = dist - slack
        if t_far > 0:
            _, status = sphere_trace_batch(occlusion_field, src.center[None],
                                           -d[None], np.array([0.0]),
                                           np.array([t_far]),
                                           eps=cfg.trace_eps, max_steps=64)
            if status[0] != _kernels.TRACE_MISS:
                return invalid

    a, _ = sample_patch(to_gray(ref.image), patch)
    b, _ = sample_patch(to_gray(src.image), warped)
    return PairScore(ref.id, src.id, float(1.0 - ssim(a, b)))


def generate_pseudo_labels(ds, geometry, view_ids, pixels,
                           cfg: Optional[ConsistencyConfig] = None,
                           images=None) -> list[PseudoLabel]:
    """Contract-level batch entry point returning PseudoLabel objects."""
    cfg = cfg or ConsistencyConfig()
    gen = LabelGenerator(ds, geometry, cfg, images=images)
    batch = gen.labels_for_pixels(view_ids, pixels)
    return [PseudoLabel(position=batch["positions"][i],
                        score=float(batch["scores"][i]),
                        count=int(batch["counts"][i]),
                        view_id=int(batch["view_ids"][i]))
            for i in range(len(batch["scores"]))]


def labels_to_csv(path, batch_or_labels):
    """Write labels as CSV rows `x,y,z,G,count`."""
    with open(path, "w") as f:
        f.write("x,y,z,G,count\n")
        if isinstance(batch_or_labels, dict):
            for p, g, c in zip(batch_or_labels["positions"],
                               batch_or_labels["scores"],
                               batch_or_labels["counts"]):
                f.write(f"{p[0]:.9g},{p[1]:.9g},{p[2]:.9g},{g:.9g},{c}\n")
        else:
            for lab in batch_or_labels:
                p = lab.position
                f.write(f"{p[0]:.9g},{p[1]:.9g},{p[2]:.9g},"
                        f"{lab.score:.9g},{lab.count}\n")
