"""Uncertainty-guided next-best-view simulation.

Candidate viewpoints are partitioned into longitude/latitude regions around
the bounding sphere; one view per region seeds the training and test sets.
Each round fuses the current training depths into a TSDF, distills an
uncertainty grid from photometric consistency, surface-renders the grid
into every unused candidate, and greedily adds the highest-scoring view
(global argmax, ties to the lowest id). A seeded random policy serves as
the baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .consistency import ConsistencyConfig
from .metrics import (chamfer, normalize_to_unit_sphere,
                      surface_points_from_field, surface_points_from_grid)
from .scene import SceneDataset, render_view, tsdf_fuse
from .surface import ray_sphere_interval, sphere_trace_batch
from .uncertainty import TrainConfig, UncertaintyGrid, train_stage1


@dataclass
class ViewPool:
    view_ids: np.ndarray        # candidate ids
    regions: np.ndarray         # region index per candidate
    status: dict                # id -> "unused" | "training" | "test"
    n_regions: int

    def ids_with_status(self, status):
        return sorted(int(v) for v in self.view_ids
                      if self.status[int(v)] == status)

    @property
    def training_ids(self):
        return self.ids_with_status("training")

    @property
    def test_ids(self):
        return self.ids_with_status("test")

    @property
    def unused_ids(self):
        return self.ids_with_status("unused")


def _region_grid(n_regions):
    """Split n_regions into latitude x longitude band counts."""
    n_lat = max(1, int(round(np.sqrt(n_regions / 2.0))))
    while n_regions % n_lat != 0:
        n_lat -= 1
    return n_lat, n_regions // n_lat


def init_pool(ds: SceneDataset, n_regions: int, seed: int = 0) -> ViewPool:
    """Partition candidate viewing directions into regions and draw one
    training and one test view per region (seeded)."""
    views = ds.views
    if len(views) < 2 * n_regions:
        raise ValueError("need at least 2 candidates per region")
    centers = np.stack([v.center for v in views])
    rel = centers - ds.bounding_sphere.center[None]
    lon = np.arctan2(rel[:, 1], rel[:, 0])
    lat = np.arcsin(np.clip(rel[:, 2] / np.linalg.norm(rel, axis=-1), -1, 1))

    n_lat, n_lon = _region_grid(n_regions)
    lat_lo, lat_hi = lat.min() - 1e-9, lat.max() + 1e-9
    lat_band = np.minimum(((lat - lat_lo) / (lat_hi - lat_lo) * n_lat)
                          .astype(np.int64), n_lat - 1)
    lon_band = np.minimum(((lon + np.pi) / (2 * np.pi) * n_lon)
                          .astype(np.int64), n_lon - 1)
    regions = lat_band * n_lon + lon_band

    rng = np.random.default_rng(seed)
    status = {int(v.id): "unused" for v in views}
    for r in range(n_regions):
        members = sorted(int(views[i].id) for i in np.nonzero(regions == r)[0])
        if len(members) < 2:
            raise ValueError(
                f"region {r} has {len(members)} candidate view(s); "
                "need at least 2 (one training, one test)")
        train_pick = int(rng.choice(members))
        rest = [m for m in members if m != train_pick]
        test_pick = int(rng.choice(rest))
        status[train_pick] = "training"
        status[test_pick] = "test"
    return ViewPool(view_ids=np.array([v.id for v in views]),
                    regions=regions, status=status, n_regions=n_regions)


def render_uncertainty_map(view, grid: UncertaintyGrid, field,
                           bounding_sphere=None, eps=1e-4, max_steps=256):
    """Surface-render the uncertainty field into a view; NaN marks misses."""
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
    out = np.full(len(dirs), np.nan)
    trace = t1 > t0
    if trace.any():
        idx = np.nonzero(trace)[0]
        t, status = sphere_trace_batch(field, origins[idx], dirs[idx],
                                       t0[idx], t1[idx], eps=eps,
                                       max_steps=max_steps)
        hit = status == _kernels.TRACE_HIT
        if hit.any():
            h = idx[hit]
            p = origins[h] + t[hit, None] * dirs[h]
            out[h] = grid.eval(p)
    return out.reshape(view.height, view.width)


def score_view(unc_map) -> float:
    """Mean uncertainty over valid (hit) pixels; all-invalid scores 0."""
    finite = np.isfinite(unc_map)
    if not finite.any():
        return 0.0
    return float(unc_map[finite].mean())


def select_nbv(ds, pool: ViewPool, grid: UncertaintyGrid, field,
               score_mode: str = "mean"):
    """Global argmax of candidate scores; ties go to the lowest view id."""
    unused = pool.unused_ids
    if not unused:
        raise ValueError("no unused candidates remain")
    best_id, best_score = None, -np.inf
    scores = {}
    for vid in unused:
        m = render_uncertainty_map(ds.view_by_id(vid), grid, field,
                                   ds.bounding_sphere)
        if score_mode == "max":
            finite = np.isfinite(m)
            s = float(m[finite].max()) if finite.any() else 0.0
        else:
            s = score_view(m)
        scores[vid] = s
        if s > best_score:
            best_id, best_score = vid, s
    return best_id, scores


def psnr(a, b, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio of [0,1] images; identical pairs hit cap."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64)
                         - np.asarray(b, dtype=np.float64)) ** 2))
    if mse <= 0:
        return cap
    return min(cap, -10.0 * np.log10(mse))


@dataclass
class NbvConfig:
    n_regions: int = 4
    rounds: int = 10
    policy: str = "uncertainty"    # or "random"
    fuse_dims: tuple = (48, 48, 48)
    fuse_truncation: float = 0.15
    depth_noise: float = 0.0
    seed: int = 0
    psnr_cap: float = 99.0
    score_mode: str = "mean"
    n_surface_points: int = 6000

    def __post_init__(self):
        if self.policy not in ("uncertainty", "random"):
            raise ValueError(f"unknown NBV policy {self.policy!r}")


@dataclass
class NbvRound:
    round_index: int
    chosen_view: int            # -1 when no selection was made
    cd: float
    psnr: float
    mean_uncertainty: float     # score of the chosen view; NaN if untrained


@dataclass
class NbvState:
    training_ids: list
    recon: object = None
    grid: Optional[UncertaintyGrid] = None
    rounds: list = field(default_factory=list)


def _subset_dataset(ds, ids):
    return SceneDataset(views=[ds.view_by_id(v) for v in ids],
                        gt_sdf=ds.gt_sdf, recon_sdf=ds.recon_sdf,
                        bounding_sphere=ds.bounding_sphere)


def run_incremental(ds: SceneDataset, pool: ViewPool, cfg: NbvConfig,
                    tcfg: TrainConfig, ccfg: Optional[ConsistencyConfig] = None,
                    shading=None, fuse_bbox=None) -> NbvState:
    """Closed NBV loop on the toy TSDF reconstructor.

    Per round: fuse training depths, distill the uncertainty grid (skipped
    under the random policy), record chamfer distance of the recon surface
    to GT (after unit-sphere normalization) plus test-view PSNR, then add
    the selected view. With `rounds` = 0 only the initial metrics row is
    produced. Rendering PSNR needs the scene `shading` model.
    """
    ccfg = ccfg or ConsistencyConfig()
    rng = np.random.default_rng([cfg.seed, 7])
    if fuse_bbox is None:
        c, r = ds.bounding_sphere.center, ds.bounding_sphere.radius
        fuse_bbox = np.array([c - 1.1 * r, c + 1.1 * r])

    gt_pts = surface_points_from_field(ds.gt_sdf, fuse_bbox,
                                       max_points=cfg.n_surface_points,
                                       rng=np.random.default_rng(cfg.seed))
    _, unit_tf = normalize_to_unit_sphere(gt_pts)
    gt_pts_n = unit_tf.apply(gt_pts)

    state = NbvState(training_ids=list(pool.training_ids))
    test_views = [ds.view_by_id(v) for v in pool.test_ids]

    for round_index in range(cfg.rounds + 1):
        train_views = [ds.view_by_id(v) for v in state.training_ids]
        recon = tsdf_fuse(train_views, cfg.fuse_dims, fuse_bbox,
                          cfg.fuse_truncation, depth_noise=cfg.depth_noise,
                          seed=cfg.seed * 1000 + round_index)
        state.recon = recon

        grid = None
        if cfg.policy == "uncertainty":
            grid = UncertaintyGrid(tcfg.grid_dims, fuse_bbox,
                                   init_value=tcfg.init_value)
            sub = _subset_dataset(ds, state.training_ids)
            train_stage1(sub, recon, grid, tcfg, ccfg)
            state.grid = grid

        recon_pts = surface_points_from_grid(
            recon.values, recon.bbox, max_points=cfg.n_surface_points,
            rng=np.random.default_rng(cfg.seed))
        cd = (chamfer(unit_tf.apply(recon_pts), gt_pts_n)
              if len(recon_pts) else np.inf)

        if shading is not None and test_views:
            vals = []
            for tv in test_views:
                rendered = render_view(recon, shading, tv.without_images(),
                                       ds.bounding_sphere)
                vals.append(psnr(rendered.image, tv.image, cap=cfg.psnr_cap))
            psnr_val = float(np.mean(vals))
        else:
            psnr_val = np.nan

        chosen = -1
        mean_unc = np.nan
        if round_index < cfg.rounds and pool.unused_ids:
            if cfg.policy == "uncertainty":
                chosen, scores = select_nbv(ds, pool, grid, recon,
                                            score_mode=cfg.score_mode)
                mean_unc = scores[chosen]
            else:
                chosen = int(rng.choice(pool.unused_ids))
            pool.status[chosen] = "training"
            state.training_ids.append(chosen)

        state.rounds.append(NbvRound(round_index, chosen, float(cd),
                                     float(psnr_val), float(mean_unc)))
    return state


def trajectory_to_csv(path, state: NbvState):
    with open(path, "w") as f:
        f.write("round,chosen_view,cd,psnr,mean_uncertainty\n")
        for r in state.rounds:
            f.write(f"{r.round_index},{r.chosen_view},{r.cd:.9g},"
                    f"{r.psnr:.9g},{r.mean_uncertainty:.9g}\n")


def uncertainty_heatmap(unc_map):
    """Rank-order color mapping of an uncertainty map, (H,W,3) float.

    Valid pixels are colored by the rank of their value (viridis-like
    3-stop ramp); misses are black.
    """
    h, w = unc_map.shape
    out = np.zeros((h, w, 3))
    finite = np.isfinite(unc_map)
    n = int(finite.sum())
    if n == 0:
        return out
    vals = unc_map[finite]
    ranks = np.empty(n)
    ranks[np.argsort(vals, kind="stable")] = np.arange(n)
    x = ranks / max(n - 1, 1)
    stops = np.array([[0.267, 0.005, 0.329],
                      [0.128, 0.567, 0.551],
                      [0.993, 0.906, 0.144]])
    seg = np.clip(x * 2, 0, 2)
    lo = np.minimum(seg.astype(np.int64), 1)
    frac = seg - lo
    colors = stops[lo] * (1 - frac[:, None]) + stops[lo + 1] * frac[:, None]
    out[finite] = colors
    return out
