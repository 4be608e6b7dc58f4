"""Compiled inner loops: trilinear grid evaluation, bilinear image sampling,
and batched sphere tracing on voxel grids.

Everything here is a plain function over ndarrays so the callers in sdf.py /
surface.py stay testable against straightforward numpy references.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def grid_eval(values, bmin, inv_spacing, pts, add_outside_distance, out):
    """Trilinear interpolation of `values` at world points `pts`.

    Coordinates are clamped to the grid. When add_outside_distance is true,
    the Euclidean distance from the query to its clamp point is added, which
    keeps a signed-distance grid >= true distance outside the bbox.
    """
    nx, ny, nz = values.shape
    for i in range(pts.shape[0]):
        gx = (pts[i, 0] - bmin[0]) * inv_spacing[0]
        gy = (pts[i, 1] - bmin[1]) * inv_spacing[1]
        gz = (pts[i, 2] - bmin[2]) * inv_spacing[2]
        cx = min(max(gx, 0.0), nx - 1.0)
        cy = min(max(gy, 0.0), ny - 1.0)
        cz = min(max(gz, 0.0), nz - 1.0)
        x0 = int(cx)
        y0 = int(cy)
        z0 = int(cz)
        if x0 > nx - 2:
            x0 = nx - 2
        if y0 > ny - 2:
            y0 = ny - 2
        if z0 > nz - 2:
            z0 = nz - 2
        fx = cx - x0
        fy = cy - y0
        fz = cz - z0
        v = (values[x0, y0, z0] * (1 - fx) * (1 - fy) * (1 - fz)
             + values[x0 + 1, y0, z0] * fx * (1 - fy) * (1 - fz)
             + values[x0, y0 + 1, z0] * (1 - fx) * fy * (1 - fz)
             + values[x0 + 1, y0 + 1, z0] * fx * fy * (1 - fz)
             + values[x0, y0, z0 + 1] * (1 - fx) * (1 - fy) * fz
             + values[x0 + 1, y0, z0 + 1] * fx * (1 - fy) * fz
             + values[x0, y0 + 1, z0 + 1] * (1 - fx) * fy * fz
             + values[x0 + 1, y0 + 1, z0 + 1] * fx * fy * fz)
        if add_outside_distance:
            dx = gx - cx
            dy = gy - cy
            dz = gz - cz
            if dx != 0.0 or dy != 0.0 or dz != 0.0:
                # convert clamp offset back to world units per axis
                wx = dx / inv_spacing[0]
                wy = dy / inv_spacing[1]
                wz = dz / inv_spacing[2]
                v += np.sqrt(wx * wx + wy * wy + wz * wz)
        out[i] = v
    return out


@njit(cache=True)
def grid_eval_grad(values, bmin, inv_spacing, pts, out_val, out_grad):
    """Trilinear value and its exact in-cell gradient.

    The gradient is of the clamped interpolant, so it is zero along axes
    where the query was clamped outside the bbox.
    """
    nx, ny, nz = values.shape
    for i in range(pts.shape[0]):
        gx = (pts[i, 0] - bmin[0]) * inv_spacing[0]
        gy = (pts[i, 1] - bmin[1]) * inv_spacing[1]
        gz = (pts[i, 2] - bmin[2]) * inv_spacing[2]
        clx = gx < 0.0 or gx > nx - 1.0
        cly = gy < 0.0 or gy > ny - 1.0
        clz = gz < 0.0 or gz > nz - 1.0
        cx = min(max(gx, 0.0), nx - 1.0)
        cy = min(max(gy, 0.0), ny - 1.0)
        cz = min(max(gz, 0.0), nz - 1.0)
        x0 = min(int(cx), nx - 2)
        y0 = min(int(cy), ny - 2)
        z0 = min(int(cz), nz - 2)
        fx = cx - x0
        fy = cy - y0
        fz = cz - z0
        c000 = values[x0, y0, z0]
        c100 = values[x0 + 1, y0, z0]
        c010 = values[x0, y0 + 1, z0]
        c110 = values[x0 + 1, y0 + 1, z0]
        c001 = values[x0, y0, z0 + 1]
        c101 = values[x0 + 1, y0, z0 + 1]
        c011 = values[x0, y0 + 1, z0 + 1]
        c111 = values[x0 + 1, y0 + 1, z0 + 1]
        out_val[i] = (c000 * (1 - fx) * (1 - fy) * (1 - fz)
                      + c100 * fx * (1 - fy) * (1 - fz)
                      + c010 * (1 - fx) * fy * (1 - fz)
                      + c110 * fx * fy * (1 - fz)
                      + c001 * (1 - fx) * (1 - fy) * fz
                      + c101 * fx * (1 - fy) * fz
                      + c011 * (1 - fx) * fy * fz
                      + c111 * fx * fy * fz)
        dx = ((c100 - c000) * (1 - fy) * (1 - fz)
              + (c110 - c010) * fy * (1 - fz)
              + (c101 - c001) * (1 - fy) * fz
              + (c111 - c011) * fy * fz)
        dy = ((c010 - c000) * (1 - fx) * (1 - fz)
              + (c110 - c100) * fx * (1 - fz)
              + (c011 - c001) * (1 - fx) * fz
              + (c111 - c101) * fx * fz)
        dz = ((c001 - c000) * (1 - fx) * (1 - fy)
              + (c101 - c100) * fx * (1 - fy)
              + (c011 - c010) * (1 - fx) * fy
              + (c111 - c110) * fx * fy)
        out_grad[i, 0] = 0.0 if clx else dx * inv_spacing[0]
        out_grad[i, 1] = 0.0 if cly else dy * inv_spacing[1]
        out_grad[i, 2] = 0.0 if clz else dz * inv_spacing[2]


@njit(cache=True)
def bilinear_sample(img, xy, out):
    """Bilinear sample of a single-channel image at (x=col, y=row) coords.

    Coordinates are clamped to the image border before interpolation; bounds
    validity is the caller's concern.
    """
    h, w = img.shape
    for i in range(xy.shape[0]):
        x = min(max(xy[i, 0], 0.0), w - 1.0)
        y = min(max(xy[i, 1], 0.0), h - 1.0)
        x0 = min(int(x), w - 2) if w > 1 else 0
        y0 = min(int(y), h - 2) if h > 1 else 0
        fx = x - x0
        fy = y - y0
        out[i] = (img[y0, x0] * (1 - fx) * (1 - fy)
                  + img[y0, x0 + 1] * fx * (1 - fy)
                  + img[y0 + 1, x0] * (1 - fx) * fy
                  + img[y0 + 1, x0 + 1] * fx * fy)
    return out


@njit(cache=True)
def warp_sample_patches(gray, H, coords, width, height, out_vals, out_ok):
    """Fused per-point homography warp + bounds check + bilinear sample.

    H is (B,3,3), coords (B,K2,2) reference pixel coordinates. out_vals
    (B,K2) receives samples of `gray` at the warped positions (clamped);
    out_ok[b] stays true only if every warped coordinate of patch b is
    finite and inside the image.
    """
    h_img, w_img = gray.shape
    B, K2 = coords.shape[0], coords.shape[1]
    for b in range(B):
        ok = True
        h00 = H[b, 0, 0]; h01 = H[b, 0, 1]; h02 = H[b, 0, 2]
        h10 = H[b, 1, 0]; h11 = H[b, 1, 1]; h12 = H[b, 1, 2]
        h20 = H[b, 2, 0]; h21 = H[b, 2, 1]; h22 = H[b, 2, 2]
        for k in range(K2):
            x = coords[b, k, 0]
            y = coords[b, k, 1]
            w = h20 * x + h21 * y + h22
            if abs(w) <= 1e-12:
                ok = False
                out_vals[b, k] = 0.0
                continue
            u = (h00 * x + h01 * y + h02) / w
            v = (h10 * x + h11 * y + h12) / w
            if u < 0.0 or u > width - 1.0 or v < 0.0 or v > height - 1.0:
                ok = False
            uu = min(max(u, 0.0), w_img - 1.0)
            vv = min(max(v, 0.0), h_img - 1.0)
            x0 = min(int(uu), w_img - 2)
            y0 = min(int(vv), h_img - 2)
            fx = uu - x0
            fy = vv - y0
            out_vals[b, k] = (gray[y0, x0] * (1 - fx) * (1 - fy)
                              + gray[y0, x0 + 1] * fx * (1 - fy)
                              + gray[y0 + 1, x0] * (1 - fx) * fy
                              + gray[y0 + 1, x0 + 1] * fx * fy)
        out_ok[b] = ok


@njit(cache=True)
def ssim_rows_kernel(a, b, c1, c2, out):
    """Row-wise single-window SSIM with unbiased (co)variance."""
    B, n = a.shape
    denom = n - 1 if n > 1 else 1
    for i in range(B):
        sa = 0.0
        sb = 0.0
        for k in range(n):
            sa += a[i, k]
            sb += b[i, k]
        mu_a = sa / n
        mu_b = sb / n
        va = 0.0
        vb = 0.0
        cov = 0.0
        for k in range(n):
            da = a[i, k] - mu_a
            db = b[i, k] - mu_b
            va += da * da
            vb += db * db
            cov += da * db
        va /= denom
        vb /= denom
        cov /= denom
        out[i] = (((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                  / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2)))


# sphere trace status codes
TRACE_MISS = 0
TRACE_HIT = 1
TRACE_EXHAUSTED = 2


@njit(cache=True)
def _grid_value_at(values, bmin, inv_spacing, px, py, pz, add_outside_distance):
    nx, ny, nz = values.shape
    gx = (px - bmin[0]) * inv_spacing[0]
    gy = (py - bmin[1]) * inv_spacing[1]
    gz = (pz - bmin[2]) * inv_spacing[2]
    cx = min(max(gx, 0.0), nx - 1.0)
    cy = min(max(gy, 0.0), ny - 1.0)
    cz = min(max(gz, 0.0), nz - 1.0)
    x0 = min(int(cx), nx - 2)
    y0 = min(int(cy), ny - 2)
    z0 = min(int(cz), nz - 2)
    fx = cx - x0
    fy = cy - y0
    fz = cz - z0
    v = (values[x0, y0, z0] * (1 - fx) * (1 - fy) * (1 - fz)
         + values[x0 + 1, y0, z0] * fx * (1 - fy) * (1 - fz)
         + values[x0, y0 + 1, z0] * (1 - fx) * fy * (1 - fz)
         + values[x0 + 1, y0 + 1, z0] * fx * fy * (1 - fz)
         + values[x0, y0, z0 + 1] * (1 - fx) * (1 - fy) * fz
         + values[x0 + 1, y0, z0 + 1] * fx * (1 - fy) * fz
         + values[x0, y0 + 1, z0 + 1] * (1 - fx) * fy * fz
         + values[x0 + 1, y0 + 1, z0 + 1] * fx * fy * fz)
    if add_outside_distance:
        wx = (gx - cx) / inv_spacing[0]
        wy = (gy - cy) / inv_spacing[1]
        wz = (gz - cz) / inv_spacing[2]
        if wx != 0.0 or wy != 0.0 or wz != 0.0:
            v += np.sqrt(wx * wx + wy * wy + wz * wz)
    return v


@njit(cache=True)
def sphere_trace_grid(values, bmin, inv_spacing, origins, dirs, t_near, t_far,
                      eps, max_steps, omega, add_outside_distance,
                      out_t, out_status):
    """Batched sphere tracing against a trilinear grid.

    Marches t <- t + omega * f(p(t)) until |f| < eps (hit), t > t_far (miss)
    or the step budget runs out (miss, flagged TRACE_EXHAUSTED).
    """
    n = origins.shape[0]
    for i in range(n):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        t = t_near[i]
        tf = t_far[i]
        status = TRACE_MISS
        t_out = t
        if t <= tf:
            status = TRACE_EXHAUSTED
            for _ in range(max_steps):
                f = _grid_value_at(values, bmin, inv_spacing,
                                   ox + t * dx, oy + t * dy, oz + t * dz,
                                   add_outside_distance)
                if abs(f) < eps:
                    status = TRACE_HIT
                    t_out = t
                    break
                t = t + omega * f
                if t > tf:
                    status = TRACE_MISS
                    t_out = t
                    break
                if t < t_near[i]:
                    # backtracked out of the interval (field pushed us out)
                    status = TRACE_MISS
                    t_out = t
                    break
            else:
                t_out = t
        out_t[i] = t_out
        out_status[i] = status


@njit(cache=True)
def tsdf_accumulate(values_sum, weight_sum, voxel_pts, depth_img, K, R, t,
                    width, height, truncation):
    """Accumulate one depth view into running TSDF sums.

    voxel_pts is (N,3) world coordinates of the grid nodes in the same order
    as values_sum.ravel(). A node contributes when it projects inside the
    image, the pixel carries a hit depth (> 0), and the node is not more
    than `truncation` behind the observed surface.
    """
    fx = K[0, 0]
    fy = K[1, 1]
    cx = K[0, 2]
    cy = K[1, 2]
    ox = -(R[0, 0] * t[0] + R[1, 0] * t[1] + R[2, 0] * t[2])
    oy = -(R[0, 1] * t[0] + R[1, 1] * t[1] + R[2, 1] * t[2])
    oz = -(R[0, 2] * t[0] + R[1, 2] * t[1] + R[2, 2] * t[2])
    for i in range(voxel_pts.shape[0]):
        px, py, pz = voxel_pts[i, 0], voxel_pts[i, 1], voxel_pts[i, 2]
        xc = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
        yc = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
        zc = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
        if zc <= 1e-9:
            continue
        u = fx * xc / zc + cx
        v = fy * yc / zc + cy
        ui = int(round(u))
        vi = int(round(v))
        if ui < 0 or ui >= width or vi < 0 or vi >= height:
            continue
        d_obs = depth_img[vi, ui]
        if d_obs <= 0.0:
            continue
        ddx = px - ox
        ddy = py - oy
        ddz = pz - oz
        d_vox = np.sqrt(ddx * ddx + ddy * ddy + ddz * ddz)
        sdf = d_obs - d_vox
        if sdf < -truncation:
            continue
        if sdf > truncation:
            sdf = truncation
        values_sum[i] += sdf
        weight_sum[i] += 1.0
