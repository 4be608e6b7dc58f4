"""View-dependent / view-independent radiance split on the surface.

Per voxel cell, observed surface colors are explained as
c_vi + SH(w_r) . coef where w_r is the reflection of the direction toward
the camera about the surface normal and SH is the real spherical-harmonic
basis of degree <= 2. The fit is ridge-regularized least squares with a
closed-form per-cell solve; rendering the view-dependent part and
subtracting it from the inputs yields "processed" images for fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .surface import ray_sphere_interval, sphere_trace_batch

_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2a = 1.0925484305920792
_SH_C2b = 0.31539156525252005
_SH_C2c = 0.5462742152960396

N_SH = 9


def reflection_dir(v, n):
    """Reflect the (unit) direction toward the viewer about the unit normal."""
    v = np.asarray(v, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return 2.0 * np.dot(n, v) * n - v


def reflection_dirs(v, n):
    """Vectorized reflection for (N,3) stacks."""
    dots = np.einsum("ij,ij->i", n, v)
    return 2.0 * dots[:, None] * n - v


def sh_basis(dirs):
    """Real SH basis up to degree 2 evaluated at unit directions, (N,9)."""
    d = np.atleast_2d(dirs)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    return np.stack([
        np.full(len(d), _SH_C0),
        _SH_C1 * y,
        _SH_C1 * z,
        _SH_C1 * x,
        _SH_C2a * x * y,
        _SH_C2a * y * z,
        _SH_C2b * (3 * z * z - 1.0),
        _SH_C2a * x * z,
        _SH_C2c * (x * x - y * y),
    ], axis=-1)


@dataclass
class DecoupledField:
    """Sparse per-cell storage of the radiance split over a voxel grid."""

    dims: tuple
    bbox: np.ndarray
    cell_index: np.ndarray   # (nx,ny,nz) int32 into compact arrays, -1 empty
    c_vi: np.ndarray         # (C,3)
    coefs: np.ndarray        # (C,9,3)
    counts: np.ndarray       # (C,)

    def _cells_for(self, points):
        pts = np.atleast_2d(points)
        spacing = (self.bbox[1] - self.bbox[0]) / (np.array(self.dims) - 1)
        ijk = np.round((pts - self.bbox[0]) / spacing).astype(np.int64)
        ijk = np.clip(ijk, 0, np.array(self.dims) - 1)
        return self.cell_index[ijk[:, 0], ijk[:, 1], ijk[:, 2]]

    def eval_vd(self, points, w_r):
        """Clamped view-dependent color at (point, reflection dir), (N,3)."""
        cells = self._cells_for(points)
        out = np.zeros((len(cells), 3))
        filled = cells >= 0
        if filled.any():
            phi = sh_basis(np.atleast_2d(w_r)[filled])
            out[filled] = np.einsum("nk,nkc->nc", phi, self.coefs[cells[filled]])
        return np.maximum(out, 0.0)

    def eval_vi(self, points):
        """View-independent color; empty cells return 0."""
        cells = self._cells_for(points)
        out = np.zeros((len(cells), 3))
        filled = cells >= 0
        out[filled] = self.c_vi[cells[filled]]
        return out


def _stratified_pixels(width, height, n, rng):
    """Roughly n pixels, one per cell of a uniform image subdivision."""
    s = max(1, int(np.ceil(np.sqrt(n))))
    gx = np.linspace(0, width, s + 1)
    gy = np.linspace(0, height, s + 1)
    xs, ys = [], []
    for j in range(s):
        for i in range(s):
            xs.append(rng.integers(int(gx[i]), max(int(gx[i + 1]), int(gx[i]) + 1)))
            ys.append(rng.integers(int(gy[j]), max(int(gy[j + 1]), int(gy[j]) + 1)))
    px = np.stack([np.array(xs), np.array(ys)], axis=-1)
    px = px[rng.permutation(len(px))[:n]]
    return np.clip(px, 0, [width - 1, height - 1]).astype(np.float64)


def _surface_observations(ds, geometry, samples_per_view, seed,
                          eps=1e-4, max_steps=256):
    """Trace stratified pixels of every view to the surface; returns
    positions, reflection dirs, observed colors."""
    pos_all, wr_all, col_all = [], [], []
    for view in ds.views:
        if view.image is None:
            continue
        rng = np.random.default_rng([seed, view.id])
        px = _stratified_pixels(view.width, view.height, samples_per_view, rng)
        dirs = view.pixel_rays(px)
        origins = np.broadcast_to(view.center, dirs.shape)
        t0, t1, ok = ray_sphere_interval(origins, dirs,
                                         ds.bounding_sphere.center,
                                         ds.bounding_sphere.radius)
        if not ok.any():
            continue
        t0, t1, px, dirs = t0[ok], t1[ok], px[ok], dirs[ok]
        origins = origins[ok]
        t, status = sphere_trace_batch(geometry, origins, dirs, t0, t1,
                                       eps=eps, max_steps=max_steps)
        hit = status == _kernels.TRACE_HIT
        if not hit.any():
            continue
        p = origins[hit] + t[hit, None] * dirs[hit]
        grad = geometry.gradient(p)
        nn = np.linalg.norm(grad, axis=-1, keepdims=True)
        normals = np.where(nn > 1e-12, grad / np.maximum(nn, 1e-12), -dirs[hit])
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
        w_r = reflection_dirs(-dirs[hit], normals)
        xi = px[hit].astype(np.int64)
        colors = view.image[xi[:, 1], xi[:, 0]].astype(np.float64)
        pos_all.append(p)
        wr_all.append(w_r)
        col_all.append(colors)
    if not pos_all:
        return (np.zeros((0, 3)),) * 3
    return (np.concatenate(pos_all), np.concatenate(wr_all),
            np.concatenate(col_all))


def fit_decoupled(ds, geometry, samples_per_view=2048, lambda_reg=1e-3,
                  seed=0, dims=None, bbox=None,
                  residual_gate=0.12) -> DecoupledField:
    """Fit the per-cell radiance split from surface observations.

    Per cell and channel, solves ridge least squares
    min sum (c_vi + SH(w_r).coef - color)^2 + lambda * n_obs * |coef|^2;
    only the SH coefficients are penalized, which also breaks the
    collinearity between the constant basis function and c_vi. Cells with
    under 4 observations keep coef = 0 and the mean color. Cells whose
    post-fit RMS residual exceeds residual_gate also drop their lobe:
    there the split does not explain the observations (typically broken
    geometry), so subtracting it downstream would only inject noise.
    """
    if lambda_reg <= 0:
        raise ValueError("lambda_reg must be positive")
    if not ds.views:
        raise ValueError("dataset has no views")
    if dims is None:
        dims = ds.recon_sdf.dims if ds.recon_sdf is not None else (64, 64, 64)
    if bbox is None:
        bbox = (ds.recon_sdf.bbox if ds.recon_sdf is not None
                else np.array([ds.bounding_sphere.center - ds.bounding_sphere.radius,
                               ds.bounding_sphere.center + ds.bounding_sphere.radius]))
    dims = tuple(int(d) for d in dims)
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)

    pos, w_r, colors = _surface_observations(ds, geometry, samples_per_view,
                                             seed)
    return fit_from_observations(pos, w_r, colors, dims, bbox, lambda_reg,
                                 residual_gate=residual_gate)


def fit_from_observations(pos, w_r, colors, dims, bbox, lambda_reg=1e-3,
                          residual_gate=0.12) -> DecoupledField:
    """Per-cell ridge solve over explicit (position, w_r, color) samples."""
    dims = tuple(int(d) for d in dims)
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    cell_index = np.full(dims, -1, dtype=np.int32)
    if len(pos) == 0:
        return DecoupledField(dims, bbox, cell_index, np.zeros((0, 3)),
                              np.zeros((0, N_SH, 3)), np.zeros(0, dtype=np.int64))

    spacing = (bbox[1] - bbox[0]) / (np.array(dims) - 1)
    ijk = np.clip(np.round((pos - bbox[0]) / spacing).astype(np.int64),
                  0, np.array(dims) - 1)
    lin = np.ravel_multi_index((ijk[:, 0], ijk[:, 1], ijk[:, 2]), dims)
    uniq, inverse = np.unique(lin, return_inverse=True)
    C = len(uniq)

    phi = np.concatenate([np.ones((len(pos), 1)), sh_basis(w_r)], axis=-1)
    ata = np.zeros((C, 10, 10))
    atb = np.zeros((C, 10, 3))
    counts = np.zeros(C, dtype=np.int64)
    np.add.at(ata, inverse, phi[:, :, None] * phi[:, None, :])
    np.add.at(atb, inverse, phi[:, :, None] * colors[:, None, :])
    np.add.at(counts, inverse, 1)
    color_sum = np.zeros((C, 3))
    np.add.at(color_sum, inverse, colors)

    c_vi = color_sum / counts[:, None]
    coefs = np.zeros((C, N_SH, 3))
    solvable = counts >= 4
    if solvable.any():
        reg = np.zeros((10, 10))
        reg[1:, 1:] = np.eye(N_SH)
        M = ata[solvable] + lambda_reg * counts[solvable, None, None] * reg[None]
        x = np.linalg.solve(M, atb[solvable])
        c_vi[solvable] = x[:, 0, :]
        coefs[solvable] = x[:, 1:, :]

    if residual_gate is not None:
        pred = np.einsum("nk,nkc->nc",
                         phi, np.concatenate([c_vi[inverse][:, None, :],
                                              coefs[inverse]], axis=1))
        sq = ((pred - colors) ** 2).mean(axis=1)
        sq_sum = np.zeros(C)
        np.add.at(sq_sum, inverse, sq)
        rms = np.sqrt(sq_sum / counts)
        coefs[rms > residual_gate] = 0.0

    cell_index.ravel()[uniq] = np.arange(C, dtype=np.int32)
    return DecoupledField(dims, bbox, cell_index, c_vi, coefs, counts)


def render_vd(view, geometry, dec: DecoupledField, bounding_sphere=None,
              eps=1e-4, max_steps=256):
    """Per-pixel view-dependent color image (H,W,3); misses are 0."""
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
    out = np.zeros((len(dirs), 3))
    trace = t1 > t0
    if trace.any():
        idx = np.nonzero(trace)[0]
        t, status = sphere_trace_batch(geometry, origins[idx], dirs[idx],
                                       t0[idx], t1[idx], eps=eps,
                                       max_steps=max_steps)
        hit = status == _kernels.TRACE_HIT
        if hit.any():
            h = idx[hit]
            p = origins[h] + t[hit, None] * dirs[h]
            grad = geometry.gradient(p)
            nn = np.linalg.norm(grad, axis=-1, keepdims=True)
            normals = np.where(nn > 1e-12, grad / np.maximum(nn, 1e-12),
                               -dirs[h])
            normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
            w_r = reflection_dirs(-dirs[h], normals)
            out[h] = dec.eval_vd(p, w_r)
    return out.reshape(view.height, view.width, 3)


def decouple_images(ds, dec: DecoupledField, geometry,
                    eps=1e-4, max_steps=256):
    """Processed images with the view-dependent factor removed.

    Returns (processed, vd_maps): dicts view id -> (H,W,3) float arrays;
    processed = clamp(image - I_vd, 0, 1).
    """
    processed, vd_maps = {}, {}
    for view in ds.views:
        if view.image is None:
            continue
        i_vd = render_vd(view, geometry, dec, ds.bounding_sphere,
                         eps=eps, max_steps=max_steps)
        vd_maps[view.id] = i_vd.astype(np.float32)
        processed[view.id] = np.clip(
            view.image.astype(np.float64) - i_vd, 0.0, 1.0).astype(np.float32)
    return processed, vd_maps
