import numpy as np
import pytest

from mvuncert.cameras import CameraView, intrinsics_from_fov, look_at, make_camera_rig
from mvuncert.metrics import chamfer, surface_points_from_grid
from mvuncert.scene import (AlbedoTexture, BoundingSphere, Light,
                            PerturbRegion, SceneDataset, ShadingModel,
                            perturb_sdf, render_view, tsdf_fuse)
from mvuncert.sdf import AnalyticSdf, Sphere, VoxelSdf
from mvuncert.surface import batch_surface_points

from conftest import BBOX, make_shading

SPHERE = AnalyticSdf(Sphere([0.0, 0.0, 0.0], 1.0))


def frontal_camera(distance=3.0, res=64, fov=45.0):
    K = intrinsics_from_fov(res, res, fov)
    R, t = look_at([0, 0, distance], [0, 0, 0], up=(0, 1, 0))
    return CameraView(0, K, R, t, res, res)


class TestRenderView:
    def test_center_pixel_depth(self, bounding):
        cam = frontal_camera()
        out = render_view(SPHERE, make_shading(), cam, bounding)
        # principal point at (32,32): the exact optical axis
        assert out.depth[32, 32] == pytest.approx(2.0, abs=1e-4)

    def test_miss_pixels_background_and_zero_depth(self, bounding):
        cam = frontal_camera()
        shading = make_shading()
        out = render_view(SPHERE, shading, cam, bounding)
        assert out.depth[0, 0] == 0.0
        np.testing.assert_allclose(out.image[0, 0], shading.background,
                                   atol=1e-6)

    def test_determinism_bit_identical(self, bounding):
        cam = frontal_camera()
        a = render_view(SPHERE, make_shading(), cam, bounding)
        b = render_view(SPHERE, make_shading(), cam, bounding)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.depth, b.depth)

    def test_depth_consistency_invariant(self, lambert_ds):
        ok, worst = lambert_ds.check_depth_consistency(tol=1e-3)
        assert ok, f"worst |sdf| at hit points: {worst}"

    def test_frusta_cover_bounding_sphere(self, lambert_ds):
        assert lambert_ds.check_frusta()

    def test_lambertian_shading_view_independent(self):
        shading = make_shading(k_s=0.0)
        p = np.array([[0.3, 0.2, 0.93]])
        n = p / np.linalg.norm(p)
        c1 = shading.shade(p, n, np.array([[0.0, 0.0, 1.0]]))
        v2 = np.array([[0.6, 0.0, 0.8]])
        c2 = shading.shade(p, n, v2 / np.linalg.norm(v2))
        np.testing.assert_allclose(c1, c2, atol=1e-6)

    def test_lambertian_multiview_constancy_8bit(self, sphere_gt, bounding):
        """Projections of the same surface point differ < 2/255 after
        8-bit round trip (frontal, texture-smooth fixture)."""
        shading = make_shading(k_s=0.0, freq=2.0)
        cams = make_camera_rig(8, [0, 0, 0], 3.0, 96, 96, 38.0)
        views = [render_view(sphere_gt, shading, c, bounding) for c in cams]
        quant = [np.round(v.image * 255) / 255.0 for v in views]
        rng = np.random.default_rng(0)
        dirs = rng.normal(size=(300, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = dirs  # on the unit sphere
        from mvuncert._kernels import bilinear_sample
        checked = 0
        for i in range(len(views)):
            for j in range(i + 1, len(views)):
                vi, vj = views[i], views[j]
                ci = (pts - vi.center) / np.linalg.norm(pts - vi.center, axis=1, keepdims=True)
                cj = (pts - vj.center) / np.linalg.norm(pts - vj.center, axis=1, keepdims=True)
                frontal = (np.einsum("ij,ij->i", dirs, ci) < -0.6) & \
                          (np.einsum("ij,ij->i", dirs, cj) < -0.6)
                if not frontal.any():
                    continue
                pi, zi = vi.project(pts[frontal])
                pj, zj = vj.project(pts[frontal])
                for ch in range(3):
                    a = np.empty(len(pi))
                    b = np.empty(len(pj))
                    bilinear_sample(np.ascontiguousarray(quant[i][:, :, ch], dtype=np.float64), np.ascontiguousarray(pi), a)
                    bilinear_sample(np.ascontiguousarray(quant[j][:, :, ch], dtype=np.float64), np.ascontiguousarray(pj), b)
                    assert np.abs(a - b).max() < 2 / 255
                checked += 1
        assert checked > 5

    def test_specular_differs_across_views(self):
        """Phong lobe evaluated analytically: mirror-aligned vs off-axis
        view of the same point differ by > 0.05."""
        shading = make_shading(k_s=0.8, shininess=64.0)
        light_dir = shading.lights[0].direction
        n = np.array([0.0, 0.0, 1.0])
        # mirror view: reflection of the light about the normal
        v_mirror = 2 * np.dot(n, light_dir) * n - light_dir
        v_off = np.array([np.sin(0.5), 0.0, np.cos(0.5)])
        p = np.array([[0.0, 0.0, 1.0]])
        c_mirror = shading.shade(p, n[None], v_mirror[None])
        c_off = shading.shade(p, n[None], v_off[None])
        assert np.abs(c_mirror - c_off).max() > 0.05


class TestAlbedo:
    def test_kinds_and_ranges(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-2, 2, (200, 3))
        for kind in ("solid", "checker", "noise"):
            tex = AlbedoTexture(kind, frequency=3.0, seed=1)
            vals = tex.eval(pts)
            assert vals.shape == (200, 3)
            assert vals.min() >= 0 and vals.max() <= 1
        with pytest.raises(ValueError):
            AlbedoTexture("marble")

    def test_checker_parity(self):
        tex = AlbedoTexture("checker", frequency=1.0,
                            color_a=(1, 1, 1), color_b=(0, 0, 0))
        assert tex.eval([[0.5, 0.5, 0.5]])[0, 0] == 1.0  # cells sum 0 -> even
        assert tex.eval([[1.5, 0.5, 0.5]])[0, 0] == 0.0

    def test_shading_json_round_trip(self):
        shading = make_shading(k_s=0.4, shininess=8.0)
        clone = ShadingModel.from_json(shading.to_json())
        pts = np.random.default_rng(1).normal(size=(50, 3))
        n = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        v = -n
        np.testing.assert_allclose(shading.shade(pts, n, v),
                                   clone.shade(pts, n, v), atol=1e-12)


class TestPerturb:
    def test_empty_regions_noop(self):
        a = perturb_sdf(SPHERE, [], (24, 24, 24), BBOX)
        b = VoxelSdf.from_sampling(SPHERE, (24, 24, 24), BBOX)
        np.testing.assert_array_equal(a.values, b.values)

    def test_amplitude_bound_attained_inside(self):
        region = PerturbRegion([0.8, 0.5, 0.3], 0.55, 0.05, seed=7)
        out = perturb_sdf(SPHERE, [region], (32, 32, 32), BBOX)
        ref = VoxelSdf.from_sampling(SPHERE, (32, 32, 32), BBOX)
        diff = np.abs(out.values.astype(np.float64)
                      - ref.values.astype(np.float64))
        assert 0 < diff.max() <= 0.05 + 1e-7
        pts = ref.node_coords()
        inside = (np.linalg.norm(pts - region.center, axis=1)
                  < region.radius).reshape(out.dims, order="F")
        assert diff[~inside].max() == 0.0
        assert diff[inside].max() == diff.max()

    def test_validation(self):
        with pytest.raises(ValueError, match="radius"):
            PerturbRegion([0, 0, 0], -1.0, 0.05)
        with pytest.raises(ValueError, match="amplitude"):
            PerturbRegion([0, 0, 0], 1.0, -0.05)
        with pytest.raises(ValueError, match="outside bbox"):
            perturb_sdf(SPHERE, [PerturbRegion([9, 0, 0], 1.0, 0.05)],
                        (16, 16, 16), BBOX)

    def test_surface_error_localized(self, perturbed_ds):
        """Extracted surface points inside the region carry larger mean
        |gt| error than those outside (regression fixture, seed 7)."""
        recon = perturbed_ds.recon_sdf
        pts = surface_points_from_grid(recon.values, recon.bbox)
        err = np.abs(perturbed_ds.gt_sdf.eval(pts))
        inside = np.linalg.norm(pts - [0.8, 0.5, 0.3], axis=1) < 0.8
        assert inside.sum() > 50 and (~inside).sum() > 50
        assert err[inside].mean() > err[~inside].mean()


class TestTsdf:
    def _plane_view(self):
        """Frontal camera at z=+3 looking at the plane z=1."""

        class PlaneSdf:
            def eval(self, pts):
                return np.atleast_2d(pts)[:, 2] - 1.0

            def eval_one(self, p):
                return float(p[2] - 1.0)

            def gradient(self, pts, h=1e-5):
                g = np.zeros((len(np.atleast_2d(pts)), 3))
                g[:, 2] = 1.0
                return g

        cam = frontal_camera(distance=3.0, res=48, fov=30.0)
        shading = make_shading()
        return render_view(PlaneSdf(), shading, cam, None)

    def test_plane_zero_crossing(self):
        view = self._plane_view()
        bbox = np.array([[-0.4, -0.4, 0.5], [0.4, 0.4, 1.5]])
        grid = tsdf_fuse([view], (16, 16, 16), bbox, truncation=0.3)
        # central column in +z order: the camera looks down -z, so the
        # surface shows up as the unique negative-to-positive transition
        zs = np.linspace(0.5, 1.5, 16)
        vals = grid.eval(np.stack([np.zeros(16), np.zeros(16), zs], axis=-1))
        upward = np.nonzero((vals[:-1] < 0) & (vals[1:] > 0))[0]
        assert len(upward) == 1
        spacing = (1.5 - 0.5) / 15
        assert zs[upward[0]] - spacing <= 1.0 <= zs[upward[0] + 1] + spacing

    def test_unobserved_voxels_keep_truncation(self):
        view = self._plane_view()
        # bbox behind the camera: projects outside the image
        bbox = np.array([[5.0, 5.0, 5.0], [6.0, 6.0, 6.0]])
        grid = tsdf_fuse([view], (4, 4, 4), bbox, truncation=0.3)
        np.testing.assert_array_equal(grid.values, np.float32(0.3))

    def test_more_views_reduce_chamfer(self, sphere_gt, bounding):
        shading = make_shading()
        rig = make_camera_rig(20, [0, 0, 0], 3.0, 64, 64, 42.0)
        views = [render_view(sphere_gt, shading, c, bounding) for c in rig]
        gt_pts = surface_points_from_grid(
            VoxelSdf.from_sampling(sphere_gt, (48, 48, 48), BBOX).values, BBOX)
        cds = []
        for n in (5, 20):
            grid = tsdf_fuse(views[:n], (48, 48, 48), BBOX, truncation=0.2)
            pts = surface_points_from_grid(grid.values, BBOX)
            cds.append(chamfer(pts, gt_pts))
        assert cds[1] < cds[0]

    def test_validation(self):
        view = self._plane_view()
        with pytest.raises(ValueError, match="at least one view"):
            tsdf_fuse([], (8, 8, 8), BBOX, truncation=0.2)
        with pytest.raises(ValueError, match="truncation"):
            tsdf_fuse([view], (8, 8, 8), BBOX, truncation=0.0)
        with pytest.raises(ValueError, match="at least 2"):
            tsdf_fuse([view], (1, 8, 8), BBOX, truncation=0.2)

    def test_noise_deterministic(self):
        view = self._plane_view()
        bbox = np.array([[-0.4, -0.4, 0.5], [0.4, 0.4, 1.5]])
        a = tsdf_fuse([view], (9, 9, 9), bbox, 0.3, depth_noise=0.01, seed=5)
        b = tsdf_fuse([view], (9, 9, 9), bbox, 0.3, depth_noise=0.01, seed=5)
        np.testing.assert_array_equal(a.values, b.values)
        c = tsdf_fuse([view], (9, 9, 9), bbox, 0.3, depth_noise=0.01, seed=6)
        assert not np.array_equal(a.values, c.values)
