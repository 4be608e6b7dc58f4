"""Quantitative evaluation: depth/3D error maps, sparsification curves and
the area between them (AUSE), chamfer distance, and unit-sphere
normalization.

AUSE convention here: both sparsification curves are normalized by the
full-set mean error before integrating their difference over the removal
fraction, so values are scale-free and comparable across fixtures. Removal
ranks break ties by original index (stable), making results deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .surface import ray_sphere_interval, sphere_trace_batch


# ---------------------------------------------------------------------------
# error sources


def point_3d_error(points, gt_sdf) -> np.ndarray:
    """|gt(p)|: distance to the GT surface (exact for true-distance scenes)."""
    return np.abs(gt_sdf.eval(np.atleast_2d(points)))


def depth_error_map(field, view, bounding_sphere=None, penalty=None,
                    eps=1e-4, max_steps=256):
    """Per-pixel depth errors of `field` against the view's stored GT depth.

    Returns dict with abs_err, sq_err, uncertainty query points (one per
    scored pixel), and counts. Pixels where exactly one of GT/prediction
    misses get the configured penalty (None excludes them); both-miss
    pixels are always excluded.
    """
    if view.depth is None:
        raise ValueError("view carries no GT depth")
    dirs = view.pixel_rays()
    origins = np.broadcast_to(view.center, dirs.shape)
    if bounding_sphere is not None:
        t0, t1, ok = ray_sphere_interval(origins, dirs, bounding_sphere.center,
                                         bounding_sphere.radius)
        t0 = np.where(ok, t0, 0.0)
        t1 = np.where(ok, t1, 0.0)
    else:
        t0 = np.zeros(len(dirs))
        t1 = np.full(len(dirs), 1e3)
    pred_t = np.zeros(len(dirs))
    status = np.zeros(len(dirs), dtype=np.int64)
    trace = t1 > t0
    if trace.any():
        idx = np.nonzero(trace)[0]
        tt, st = sphere_trace_batch(field, origins[idx], dirs[idx], t0[idx],
                                    t1[idx], eps=eps, max_steps=max_steps)
        pred_t[idx] = tt
        status[idx] = st
    pred_hit = status == _kernels.TRACE_HIT
    gt_depth = view.depth.ravel()
    gt_hit = gt_depth > 0

    both = pred_hit & gt_hit
    one_sided = pred_hit ^ gt_hit
    abs_err = np.abs(pred_t - gt_depth)[both]
    pts = origins[both] + np.where(pred_hit[both], pred_t[both],
                                   gt_depth[both])[:, None] * dirs[both]
    if penalty is not None and one_sided.any():
        pen = np.full(one_sided.sum(), float(penalty))
        abs_err = np.concatenate([abs_err, pen])
        t_q = np.where(pred_hit[one_sided], pred_t[one_sided],
                       gt_depth[one_sided])
        pts = np.concatenate([pts, origins[one_sided]
                              + t_q[:, None] * dirs[one_sided]])
    return {"abs_err": abs_err, "sq_err": abs_err ** 2, "points": pts,
            "n_both": int(both.sum()), "n_one_sided": int(one_sided.sum()),
            "n_excluded": int((~pred_hit & ~gt_hit).sum())}


# ---------------------------------------------------------------------------
# sparsification / AUSE


@dataclass
class SparsificationCurve:
    fractions: np.ndarray    # leading 0.0 then the removal fractions
    err_by_gt: np.ndarray    # oracle removal (by true error)
    err_by_unc: np.ndarray   # removal by predicted uncertainty


def _removal_means(errors, criterion, ks):
    """Mean remaining error after removing the top-k by `criterion` for each
    k in ks; stable descending ranking, ties by original index."""
    order = np.argsort(-criterion, kind="stable")
    removed_cum = np.concatenate([[0.0], np.cumsum(errors[order])])
    total = removed_cum[-1]
    n = len(errors)
    means = np.empty(len(ks))
    for i, k in enumerate(ks):
        if k >= n:
            means[i] = 0.0
        else:
            means[i] = (total - removed_cum[k]) / (n - k)
    return means


def sparsification(errors, uncertainties,
                   fractions: Optional[np.ndarray] = None) -> SparsificationCurve:
    """Sparsification curves for oracle and uncertainty-ranked removal.

    Default fractions are 1%..100% in 1% steps; the returned curve always
    starts with the full-set mean at fraction 0. Removing everything
    (t = 1) defines the mean of the empty set as 0.
    """
    errors = np.asarray(errors, dtype=np.float64).ravel()
    uncertainties = np.asarray(uncertainties, dtype=np.float64).ravel()
    if errors.shape != uncertainties.shape:
        raise ValueError("errors and uncertainties must have equal length")
    if len(errors) == 0:
        raise ValueError("need at least one element")
    if fractions is None:
        fractions = np.arange(1, 101) / 100.0
    fractions = np.asarray(fractions, dtype=np.float64)
    n = len(errors)
    ks = np.floor(fractions * n + 1e-9).astype(np.int64)
    full_mean = errors.mean()
    return SparsificationCurve(
        fractions=np.concatenate([[0.0], fractions]),
        err_by_gt=np.concatenate([[full_mean],
                                  _removal_means(errors, errors, ks)]),
        err_by_unc=np.concatenate([[full_mean],
                                   _removal_means(errors, uncertainties, ks)]))


def ause(curve: SparsificationCurve) -> float:
    """Area between the normalized curves; 0 when they coincide."""
    full = curve.err_by_gt[0]
    if full == 0:
        return 0.0
    diff = (curve.err_by_unc - curve.err_by_gt) / full
    return float(np.trapezoid(diff, curve.fractions))


def curve_to_csv(path, curve: SparsificationCurve):
    with open(path, "w") as f:
        f.write("fraction,err_by_gt,err_by_unc\n")
        for t, a, b in zip(curve.fractions, curve.err_by_gt, curve.err_by_unc):
            f.write(f"{t:.9g},{a:.9g},{b:.9g}\n")


# ---------------------------------------------------------------------------
# chamfer distance


def chamfer(a, b) -> float:
    """0.5 * (mean nearest-neighbor distance A->B + B->A), KD-tree backed."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


# ---------------------------------------------------------------------------
# unit-sphere normalization


@dataclass
class UnitSphereTransform:
    center: np.ndarray
    scale: float

    def apply(self, points):
        return (np.atleast_2d(points) - self.center) * self.scale

    def inverse(self, points):
        return np.atleast_2d(points) / self.scale + self.center


def normalize_to_unit_sphere(points):
    """Translate the bbox centroid to the origin and scale by the inverse
    half-diagonal so all points fit in the closed unit ball."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    half_diag = 0.5 * float(np.linalg.norm(hi - lo))
    if half_diag <= 0:
        raise ValueError("degenerate extent: cannot normalize")
    tf = UnitSphereTransform(center=0.5 * (lo + hi), scale=1.0 / half_diag)
    return tf.apply(pts), tf


# ---------------------------------------------------------------------------
# surface sampling


def surface_points_from_grid(values, bbox, max_points=None, rng=None):
    """Zero-crossing points on grid edges along all three axes, (M,3).

    Linear interpolation between adjacent nodes with opposite signs; an
    even, mesh-free point sampling of the level set.
    """
    values = np.asarray(values, dtype=np.float64)
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    dims = values.shape
    spacing = (bbox[1] - bbox[0]) / (np.array(dims) - 1)
    pts = []
    for ax in range(3):
        s0 = values.take(np.arange(dims[ax] - 1), axis=ax)
        s1 = values.take(np.arange(1, dims[ax]), axis=ax)
        crossing = (s0 * s1) < 0
        if not crossing.any():
            continue
        idx = np.nonzero(crossing)
        t = s0[idx] / (s0[idx] - s1[idx])
        base = np.stack(idx, axis=-1).astype(np.float64)
        coords = base * spacing[None, [0, 1, 2]] + bbox[0][None]
        coords[:, ax] += t * spacing[ax]
        pts.append(coords)
    if not pts:
        return np.zeros((0, 3))
    pts = np.concatenate(pts)
    if max_points is not None and len(pts) > max_points:
        rng = rng or np.random.default_rng(0)
        pts = pts[rng.choice(len(pts), max_points, replace=False)]
    return pts


def surface_points_from_field(field, bbox, dims=(96, 96, 96),
                              max_points=None, rng=None):
    """Sample any SDF onto a grid and extract edge zero crossings."""
    from .sdf import VoxelSdf
    grid = VoxelSdf.from_sampling(field, dims, bbox)
    return surface_points_from_grid(grid.values, bbox,
                                    max_points=max_points, rng=rng)


# ---------------------------------------------------------------------------
# full-dataset report


@dataclass
class AuseReport:
    ause_mse: float
    ause_mae: float
    ause_3d: float
    cd: float
    n_pixels: int
    n_points: int

    def to_json(self):
        return {"ause_mse": self.ause_mse, "ause_mae": self.ause_mae,
                "ause_3d": self.ause_3d, "cd": self.cd,
                "n_pixels": self.n_pixels, "n_points": self.n_points}


def evaluate_dataset(ds, grid, field=None, view_ids=None, penalty=None,
                     n_surface_points=8000, gt_sample_dims=(96, 96, 96),
                     seed=0, uncertainty_override=None):
    """AUSE (MSE / MAE / 3D) and chamfer distance of a reconstruction.

    field defaults to ds.recon_sdf. Depth flavors pool pixels over the
    selected views, ranking by the uncertainty grid queried at the hit
    point; the 3D flavor scores surface samples of the reconstruction
    against |gt|. Chamfer compares unit-sphere-normalized surface samples.
    uncertainty_override(points) replaces grid queries (for baselines).
    """
    field = field if field is not None else ds.recon_sdf
    if field is None:
        raise ValueError("no reconstructed field to evaluate")
    if penalty is None:
        penalty = 2.0 * ds.bounding_sphere.radius

    def query_u(points):
        if uncertainty_override is not None:
            return uncertainty_override(points)
        return grid.eval(points)

    views = ds.views if view_ids is None else [ds.view_by_id(v)
                                               for v in view_ids]
    abs_all, sq_all, unc_all = [], [], []
    for view in views:
        if view.depth is None:
            continue
        em = depth_error_map(field, view, ds.bounding_sphere, penalty=penalty)
        if len(em["abs_err"]) == 0:
            continue
        abs_all.append(em["abs_err"])
        sq_all.append(em["sq_err"])
        unc_all.append(query_u(em["points"]))
    n_pixels = 0
    ause_mae = ause_mse = 0.0
    curves = {}
    if abs_all:
        abs_all = np.concatenate(abs_all)
        sq_all = np.concatenate(sq_all)
        unc_all = np.concatenate(unc_all)
        n_pixels = len(abs_all)
        curves["mae"] = sparsification(abs_all, unc_all)
        curves["mse"] = sparsification(sq_all, unc_all)
        ause_mae = ause(curves["mae"])
        ause_mse = ause(curves["mse"])

    rng = np.random.default_rng(seed)
    recon_pts = surface_points_from_grid(field.values, field.bbox,
                                         max_points=n_surface_points, rng=rng)
    errs_3d = point_3d_error(recon_pts, ds.gt_sdf)
    unc_3d = query_u(recon_pts)
    curves["3d"] = sparsification(errs_3d, unc_3d)
    ause_3d = ause(curves["3d"])

    gt_pts = surface_points_from_field(
        ds.gt_sdf, field.bbox, dims=gt_sample_dims,
        max_points=n_surface_points, rng=rng)
    _, tf = normalize_to_unit_sphere(gt_pts)
    cd = chamfer(tf.apply(recon_pts), tf.apply(gt_pts))

    report = AuseReport(ause_mse=ause_mse, ause_mae=ause_mae, ause_3d=ause_3d,
                        cd=cd, n_pixels=n_pixels, n_points=len(recon_pts))
    return report, curves
