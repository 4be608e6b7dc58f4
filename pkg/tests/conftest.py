import numpy as np
import pytest

from mvuncert.cameras import make_camera_rig
from mvuncert.scene import (AlbedoTexture, BoundingSphere, Light,
                            PerturbRegion, SceneDataset, ShadingModel,
                            perturb_sdf, render_views)
from mvuncert.sdf import AnalyticSdf, Sphere, VoxelSdf

BBOX = np.array([[-1.43, -1.43, -1.43], [1.43, 1.43, 1.43]])


def small_rig(count=12, res=96, fov=38.0, distance=3.0):
    return make_camera_rig(count, [0, 0, 0], distance, res, res, fov)


def make_shading(k_s=0.0, shininess=2.0, tex_seed=0, freq=4.0):
    return ShadingModel(
        albedo=AlbedoTexture("noise", frequency=freq, seed=tex_seed),
        lights=[Light([0.5, 0.3, 0.8], [0.35, 0.35, 0.35]),
                Light([-0.7, -0.2, 0.4], [0.15, 0.15, 0.17], specular=False)],
        ambient=np.array([0.12, 0.12, 0.12]),
        k_s=k_s, shininess=shininess)


@pytest.fixture(scope="session")
def sphere_gt():
    return AnalyticSdf(Sphere([0.0, 0.0, 0.0], 1.0))


@pytest.fixture(scope="session")
def bounding():
    return BoundingSphere([0.0, 0.0, 0.0], 1.3)


@pytest.fixture(scope="session")
def lambert_ds(sphere_gt, bounding):
    """Lambertian sphere, clean reconstruction (sampled GT)."""
    shading = make_shading(k_s=0.0)
    views = render_views(sphere_gt, shading, small_rig(), bounding, aa=2)
    recon = VoxelSdf.from_sampling(sphere_gt, (48, 48, 48), BBOX)
    return SceneDataset(views=views, gt_sdf=sphere_gt, recon_sdf=recon,
                        bounding_sphere=bounding)


@pytest.fixture(scope="session")
def perturbed_ds(sphere_gt, bounding):
    """Lambertian sphere with a localized geometry error bump."""
    shading = make_shading(k_s=0.0, freq=5.0)
    views = render_views(sphere_gt, shading, small_rig(count=20, res=128),
                         bounding, aa=2)
    region = PerturbRegion([0.8, 0.5, 0.3], 0.8, 0.3, seed=7, mode="bump")
    recon = perturb_sdf(sphere_gt, [region], (64, 64, 64), BBOX)
    return SceneDataset(views=views, gt_sdf=sphere_gt, recon_sdf=recon,
                        bounding_sphere=bounding)


@pytest.fixture(scope="session")
def specular_ds(sphere_gt, bounding):
    """Broad Phong lobe on the main light; geometry error on the far side."""
    shading = make_shading(k_s=0.5, shininess=2.0, freq=5.0)
    views = render_views(sphere_gt, shading, small_rig(count=20, res=128),
                         bounding, aa=2)
    region = PerturbRegion([-0.5, -0.3, -0.8], 0.8, 0.35, seed=11,
                           mode="bump")
    recon = perturb_sdf(sphere_gt, [region], (64, 64, 64), BBOX)
    return SceneDataset(views=views, gt_sdf=sphere_gt, recon_sdf=recon,
                        bounding_sphere=bounding)
