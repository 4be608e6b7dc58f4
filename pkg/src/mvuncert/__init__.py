"""Per-point geometric uncertainty for SDF surface reconstructions.

Pipeline: synthetic scene rendering -> ray-surface intersection ->
patch-based multi-view photometric consistency -> online distillation into
a trilinear uncertainty field -> view-dependent decoupling fine-tune ->
AUSE / chamfer evaluation -> uncertainty-guided next-best-view planning.
"""

__version__ = "0.1.0"

from .scene import (AlbedoTexture, BoundingSphere, Light, PerturbRegion,
                    SceneDataset, ShadingModel, perturb_sdf, render_view,
                    tsdf_fuse)
from .sdf import AnalyticSdf, VoxelSdf
from .cameras import CameraView, make_camera_rig
from .surface import Ray, SurfacePoint, find_zero_crossing, sdf_gradient, sphere_trace
from .consistency import (ConsistencyConfig, PairScore, PseudoLabel,
                          aggregate, generate_pseudo_labels, homography,
                          pair_consistency, ssim, tangent_plane, to_gray)
from .decouple import DecoupledField, decouple_images, fit_decoupled, reflection_dir, render_vd
from .uncertainty import (TrainConfig, UncertaintyGrid, distill_loss,
                          eval_uncertainty, finetune_stage2, train_stage1)
from .metrics import (AuseReport, ause, chamfer, depth_error_map,
                      normalize_to_unit_sphere, point_3d_error,
                      sparsification)
from .nbv import (NbvConfig, init_pool, render_uncertainty_map,
                  run_incremental, score_view, select_nbv)
