import numpy as np
import pytest

from mvuncert.sdf import AnalyticSdf, Sphere, VoxelSdf
from mvuncert.surface import (Ray, batch_surface_points, find_zero_crossing,
                              find_zero_crossing_batch, ray_sphere_interval,
                              sdf_gradient, sphere_trace, sphere_trace_batch)

SPHERE = AnalyticSdf(Sphere([0.0, 0.0, 0.0], 1.0))


class LinearField:
    """f(p) = a . p + b: exactly linear along any ray."""

    def __init__(self, a, b):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = b

    def eval(self, pts):
        return np.atleast_2d(pts) @ self.a + self.b

    def eval_one(self, p):
        return float(self.eval(p)[0])

    def gradient(self, pts, h=1e-5):
        return np.broadcast_to(self.a, (len(np.atleast_2d(pts)), 3)).copy()


class CubicField:
    """f = (1 - x)^3: zero crossing at x=1 with vanishing gradient."""

    def eval(self, pts):
        return (1.0 - np.atleast_2d(pts)[:, 0]) ** 3

    def eval_one(self, p):
        return float(self.eval(p)[0])

    def gradient(self, pts, h=1e-5):
        pts = np.atleast_2d(pts)
        g = np.zeros((len(pts), 3))
        g[:, 0] = -3.0 * (1.0 - pts[:, 0]) ** 2
        return g


class TestGradient:
    def test_unit_sphere_radial(self):
        g = sdf_gradient(SPHERE, [2.0, 0.0, 0.0])
        np.testing.assert_allclose(g, [1, 0, 0], atol=1e-9)

    def test_center_zero(self):
        g = sdf_gradient(SPHERE, [0.0, 0.0, 0.0])
        np.testing.assert_allclose(g, [0, 0, 0], atol=1e-9)

    def test_grid_field_uses_grid_gradient(self):
        grid = VoxelSdf.from_sampling(SPHERE, (32, 32, 32),
                                      [[-1.3] * 3, [1.3] * 3])
        g = sdf_gradient(grid, [1.0, 0.0, 0.0])
        g = g / np.linalg.norm(g)
        np.testing.assert_allclose(g, [1, 0, 0], atol=1e-3)


class TestZeroCrossing:
    def test_symmetric_interpolation_exact(self):
        # samples land exactly at t=0.9 (s=+0.1) and t=1.1 (s=-0.1)
        ray = Ray([-2, 0, 0], [1, 0, 0], (0.9, 1.1))
        sp = find_zero_crossing(SPHERE, ray, n_samples=2)
        assert sp is not None
        assert sp.t == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(sp.position, [-1, 0, 0], atol=1e-12)

    def test_miss(self):
        ray = Ray([-2, 3, 0], [1, 0, 0], (0.0, 5.0))
        assert find_zero_crossing(SPHERE, ray, n_samples=64) is None

    def test_requires_two_samples(self):
        ray = Ray([-2, 0, 0], [1, 0, 0], (0.0, 5.0))
        with pytest.raises(ValueError):
            find_zero_crossing(SPHERE, ray, n_samples=1)

    def test_linear_field_residual_zero(self):
        # f = x - 0.537 decreases along -x; crossing at x = 0.537
        field = LinearField([1.0, 0.0, 0.0], -0.537)
        ray = Ray([2, 0.2, 0.1], [-1, 0, 0], (0.0, 3.0))
        sp = find_zero_crossing(field, ray, n_samples=7)
        assert sp is not None
        assert sp.residual < 1e-9

    def test_first_entering_pair_wins(self):
        # two spheres along the ray; must return the first surface
        from mvuncert.sdf import Union
        two = AnalyticSdf(Union([Sphere([0, 0, 0], 0.5),
                                 Sphere([3, 0, 0], 0.5)]))
        ray = Ray([-2, 0, 0], [1, 0, 0], (0.0, 6.0))
        sp = find_zero_crossing(two, ray, n_samples=512)
        assert sp.t == pytest.approx(1.5, abs=2e-2)

    def test_random_rays_vs_bisection_oracle(self):
        rng = np.random.default_rng(0)
        n_rays, n_samples = 100, 128
        t0, t1 = 0.0, 4.0
        for _ in range(n_rays):
            origin = rng.normal(size=3)
            origin = origin / np.linalg.norm(origin) * rng.uniform(2.0, 3.0)
            target = rng.normal(size=3) * 0.3
            d = target - origin
            d /= np.linalg.norm(d)
            ray = Ray(origin, d, (t0, t1))
            sp = find_zero_crossing(SPHERE, ray, n_samples=n_samples)
            # oracle: dense scan for the first + -> - pair, then bisection
            ts = np.linspace(t0, t1, 100_000)
            s = SPHERE.eval(origin[None] + ts[:, None] * d[None])
            pairs = np.nonzero((s[:-1] > 0) & (s[1:] < 0))[0]
            if len(pairs) == 0:
                assert sp is None
                continue
            lo, hi = ts[pairs[0]], ts[pairs[0] + 1]
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if SPHERE.eval_one(origin + mid * d) > 0:
                    lo = mid
                else:
                    hi = mid
            assert sp is not None
            assert abs(sp.t - 0.5 * (lo + hi)) < (t1 - t0) / n_samples

    def test_normals_front_facing(self):
        rng = np.random.default_rng(1)
        origins = rng.normal(size=(200, 3))
        origins = origins / np.linalg.norm(origins, axis=1, keepdims=True) * 2.5
        dirs = rng.normal(size=(200, 3)) * 0.2 - origins
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        res = batch_surface_points(SPHERE, origins, dirs,
                                   np.zeros(200), np.full(200, 5.0),
                                   method="sample")
        hit = res["hit"]
        dots = np.einsum("ij,ij->i", res["normals"][hit], dirs[hit])
        assert np.all(dots < 0)


class TestSphereTrace:
    def test_direct_hit(self):
        ray = Ray([-2, 0, 0], [1, 0, 0], (0.0, 5.0))
        sp = sphere_trace(SPHERE, ray, eps=1e-4)
        assert sp is not None
        np.testing.assert_allclose(sp.position, [-1, 0, 0], atol=1e-3)
        assert sp.residual < 1e-4

    def test_miss_pointing_away(self):
        ray = Ray([-2, 0, 0], [-1, 0, 0], (0.0, 5.0))
        assert sphere_trace(SPHERE, ray, eps=1e-4) is None

    def test_residual_bound_on_random_hits(self):
        rng = np.random.default_rng(2)
        origins = rng.normal(size=(300, 3))
        origins = origins / np.linalg.norm(origins, axis=1, keepdims=True) * 2.5
        dirs = rng.normal(size=(300, 3)) * 0.2 - origins
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t, status = sphere_trace_batch(SPHERE, origins, dirs, np.zeros(300),
                                       np.full(300, 5.0), eps=1e-4)
        hits = status == 1
        assert hits.sum() > 200
        p = origins[hits] + t[hits, None] * dirs[hits]
        assert np.abs(SPHERE.eval(p)).max() < 1e-4

    def test_cross_method_agreement(self):
        rng = np.random.default_rng(3)
        n = 500
        origins = rng.normal(size=(n, 3))
        origins = origins / np.linalg.norm(origins, axis=1, keepdims=True) * 2.5
        dirs = rng.normal(size=(n, 3)) * 0.2 - origins
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t0 = np.zeros(n)
        t1 = np.full(n, 4.0)
        ts, st = sphere_trace_batch(SPHERE, origins, dirs, t0, t1, eps=1e-4)
        tz, hz = find_zero_crossing_batch(SPHERE, origins, dirs, t0, t1,
                                          n_samples=256)
        both = (st == 1) & hz
        assert both.sum() > 300
        assert np.abs(ts[both] - tz[both]).max() < 2 * 4.0 / 256

    def test_omega_validation_and_grid_clamp(self):
        ray = Ray([-2, 0, 0], [1, 0, 0], (0.0, 5.0))
        with pytest.raises(ValueError):
            sphere_trace(SPHERE, ray, omega=2.0)
        grid = VoxelSdf.from_sampling(SPHERE, (32, 32, 32),
                                      [[-1.3] * 3, [1.3] * 3])
        # omega is silently clamped to 1 on grids: still converges
        sp = sphere_trace(grid, ray, eps=1e-3, omega=1.5)
        assert sp is not None and abs(sp.t - 1.0) < 0.05

    def test_degenerate_gradient_flagged(self):
        field = CubicField()
        ray = Ray([-1, 0, 0], [1, 0, 0], (0.0, 4.0))
        sp = find_zero_crossing(field, ray, n_samples=512)
        assert sp is not None
        assert sp.degenerate_normal
        # fallback normal opposes the ray
        np.testing.assert_allclose(sp.normal, [-1, 0, 0], atol=1e-12)


def test_ray_validation():
    with pytest.raises(ValueError, match="unit"):
        Ray([0, 0, 0], [1, 1, 0])
    with pytest.raises(ValueError, match="t_range"):
        Ray([0, 0, 0], [1, 0, 0], (2.0, 1.0))


def test_ray_sphere_interval():
    t0, t1, hit = ray_sphere_interval(np.array([[-3, 0, 0]]),
                                      np.array([[1.0, 0, 0]]),
                                      [0, 0, 0], 1.0)
    assert hit[0]
    assert t0[0] == pytest.approx(2.0)
    assert t1[0] == pytest.approx(4.0)
    # inside the sphere: entry clamps to 0
    t0, t1, hit = ray_sphere_interval(np.array([[0, 0, 0]]),
                                      np.array([[1.0, 0, 0]]),
                                      [0, 0, 0], 1.0)
    assert hit[0] and t0[0] == 0.0 and t1[0] == pytest.approx(1.0)
    # miss
    _, _, hit = ray_sphere_interval(np.array([[-3, 5, 0]]),
                                    np.array([[1.0, 0, 0]]),
                                    [0, 0, 0], 1.0)
    assert not hit[0]
