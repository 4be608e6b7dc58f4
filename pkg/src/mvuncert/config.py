"""Declarative run configuration: JSON in, validated dataclasses out.

Unknown keys anywhere in the document are rejected, as are out-of-range
values, before any stage starts computing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .consistency import ConsistencyConfig
from .nbv import NbvConfig
from .scene import AlbedoTexture, BoundingSphere, PerturbRegion, ShadingModel
from .sdf import AnalyticSdf
from .uncertainty import TrainConfig


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad range, missing field)."""


def _check_keys(d, allowed, path):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")


def _require(d, key, path):
    if key not in d:
        raise ConfigError(f"{path}: missing required key {key!r}")
    return d[key]


def _positive(value, name):
    if not value > 0:
        raise ConfigError(f"{name} must be > 0 (got {value})")
    return value


@dataclass
class SceneSpec:
    gt_sdf: AnalyticSdf
    bounding_sphere: BoundingSphere
    shading: ShadingModel
    perturbations: list


@dataclass
class CameraSpec:
    count: int = 20
    distance: float = 3.0
    fov_deg: float = 45.0
    width: int = 128
    height: int = 128
    distribution: str = "fibonacci"


@dataclass
class ReconSpec:
    source: str = "perturbed"     # or "tsdf"
    dims: tuple = (64, 64, 64)
    bbox: Optional[np.ndarray] = None   # None -> 1.1x bounding sphere box
    truncation: float = 0.15
    depth_noise: float = 0.0


@dataclass
class DecoupleSpec:
    samples_per_view: int = 2048
    lambda_reg: float = 1e-3


@dataclass
class EvalSpec:
    penalty: Optional[float] = None     # None -> bounding sphere diameter
    n_surface_points: int = 8000
    views: Optional[list] = None


@dataclass
class LabelsSpec:
    batch: int = 1024
    views: Optional[list] = None


@dataclass
class RunConfig:
    seed: int
    out_dir: str
    threads: Optional[int]
    deterministic: bool
    scene: SceneSpec
    cameras: CameraSpec
    recon: ReconSpec
    consistency: ConsistencyConfig
    training: TrainConfig
    decouple: DecoupleSpec
    eval: EvalSpec
    nbv: NbvConfig
    labels: LabelsSpec
    raw: dict = field(repr=False, default_factory=dict)

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def recon_bbox(self) -> np.ndarray:
        if self.recon.bbox is not None:
            return self.recon.bbox
        c = self.scene.bounding_sphere.center
        r = 1.1 * self.scene.bounding_sphere.radius
        return np.array([c - r, c + r])


def _parse_scene(d):
    _check_keys(d, {"sdf", "bounding_sphere", "shading", "perturbations"},
                "scene")
    try:
        gt = AnalyticSdf.from_json(_require(d, "sdf", "scene"))
    except ValueError as e:
        raise ConfigError(f"scene.sdf: {e}") from e
    bs_spec = _require(d, "bounding_sphere", "scene")
    _check_keys(bs_spec, {"center", "radius"}, "scene.bounding_sphere")
    bs = BoundingSphere(bs_spec["center"],
                        _positive(bs_spec["radius"], "scene.bounding_sphere.radius"))
    shading_spec = _require(d, "shading", "scene")
    _check_keys(shading_spec,
                {"albedo", "lights", "ambient", "specular", "background"},
                "scene.shading")
    albedo_spec = shading_spec.get("albedo", {})
    _check_keys(albedo_spec, {"kind", "color_a", "color_b", "frequency", "seed"},
                "scene.shading.albedo")
    for i, l in enumerate(shading_spec.get("lights", [])):
        _check_keys(l, {"direction", "intensity", "specular"},
                    f"scene.shading.lights[{i}]")
    specular = shading_spec.get("specular", {})
    _check_keys(specular, {"k_s", "shininess"}, "scene.shading.specular")
    if specular.get("k_s", 0.0) < 0:
        raise ConfigError("scene.shading.specular.k_s must be >= 0")
    if specular.get("shininess", 16.0) < 1:
        raise ConfigError("scene.shading.specular.shininess must be >= 1")
    try:
        shading = ShadingModel.from_json(shading_spec)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"scene.shading: {e}") from e
    perturbations = []
    for i, p in enumerate(d.get("perturbations", [])):
        _check_keys(p, {"center", "radius", "amplitude", "seed", "mode"},
                    f"scene.perturbations[{i}]")
        try:
            perturbations.append(PerturbRegion(
                p["center"], p["radius"], p["amplitude"], p.get("seed", 0),
                p.get("mode", "signed")))
        except ValueError as e:
            raise ConfigError(f"scene.perturbations[{i}]: {e}") from e
    return SceneSpec(gt, bs, shading, perturbations)


def _parse_cameras(d):
    _check_keys(d, {"count", "distance", "fov_deg", "width", "height",
                    "distribution"}, "cameras")
    spec = CameraSpec(**d)
    if spec.count < 1:
        raise ConfigError("cameras.count must be >= 1")
    _positive(spec.distance, "cameras.distance")
    if not 0 < spec.fov_deg < 180:
        raise ConfigError("cameras.fov_deg must be in (0, 180)")
    if spec.width < 8 or spec.height < 8:
        raise ConfigError("cameras.width/height must be >= 8")
    if spec.distribution not in ("fibonacci", "ring"):
        raise ConfigError(f"unknown camera distribution {spec.distribution!r}")
    return spec


def _parse_recon(d):
    _check_keys(d, {"source", "dims", "bbox", "truncation", "depth_noise"},
                "recon")
    spec = ReconSpec(**{k: v for k, v in d.items() if k != "bbox"})
    if d.get("bbox") is not None:
        spec.bbox = np.asarray(d["bbox"], dtype=np.float64).reshape(2, 3)
        if not np.all(spec.bbox[0] < spec.bbox[1]):
            raise ConfigError("recon.bbox min must be < max componentwise")
    if spec.source not in ("perturbed", "tsdf"):
        raise ConfigError(f"unknown recon source {spec.source!r}")
    spec.dims = tuple(int(x) for x in spec.dims)
    if any(x < 2 for x in spec.dims):
        raise ConfigError("recon.dims must be >= 2 per axis")
    _positive(spec.truncation, "recon.truncation")
    if spec.depth_noise < 0:
        raise ConfigError("recon.depth_noise must be >= 0")
    return spec


def _parse_consistency(d):
    _check_keys(d, {"patch_size", "k_best", "occlusion_test",
                    "occlusion_slack", "max_src_views", "min_cos_facing",
                    "n_samples", "trace_eps", "trace_max_steps"},
                "consistency")
    try:
        return ConsistencyConfig(**d)
    except ValueError as e:
        raise ConfigError(f"consistency: {e}") from e


def _parse_training(d):
    _check_keys(d, {"batch_rays", "steps_stage1", "steps_finetune", "lr",
                    "beta1", "beta2", "eps", "seed", "label_refresh",
                    "grid_dims", "init_value"}, "training")
    try:
        cfg = TrainConfig(**{k: (tuple(v) if k == "grid_dims" else v)
                             for k, v in d.items()})
    except ValueError as e:
        raise ConfigError(f"training: {e}") from e
    if not 0 <= cfg.init_value <= 2:
        raise ConfigError("training.init_value must lie in [0, 2]")
    return cfg


def _parse_decouple(d):
    _check_keys(d, {"samples_per_view", "lambda_reg"}, "decouple")
    spec = DecoupleSpec(**d)
    _positive(spec.samples_per_view, "decouple.samples_per_view")
    _positive(spec.lambda_reg, "decouple.lambda_reg")
    return spec


def _parse_eval(d):
    _check_keys(d, {"penalty", "n_surface_points", "views"}, "eval")
    spec = EvalSpec(**d)
    _positive(spec.n_surface_points, "eval.n_surface_points")
    return spec


def _parse_nbv(d):
    _check_keys(d, {"n_regions", "rounds", "policy", "fuse_dims",
                    "fuse_truncation", "depth_noise", "seed", "psnr_cap",
                    "score_mode", "n_surface_points"}, "nbv")
    try:
        cfg = NbvConfig(**{k: (tuple(v) if k == "fuse_dims" else v)
                           for k, v in d.items()})
    except ValueError as e:
        raise ConfigError(f"nbv: {e}") from e
    if cfg.rounds < 0 or cfg.n_regions < 1:
        raise ConfigError("nbv.rounds must be >= 0 and n_regions >= 1")
    return cfg


def _parse_labels(d):
    _check_keys(d, {"batch", "views"}, "labels")
    spec = LabelsSpec(**d)
    if spec.batch < 0:
        raise ConfigError("labels.batch must be >= 0")
    return spec


_TOP_KEYS = {"seed", "out_dir", "threads", "deterministic", "scene",
             "cameras", "recon", "consistency", "training", "decouple",
             "eval", "nbv", "labels"}


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "config")
    if "scene" not in doc:
        raise ConfigError("config: missing required key 'scene'")
    threads = doc.get("threads")
    if threads is not None and threads < 1:
        raise ConfigError("threads must be >= 1")
    return RunConfig(
        seed=int(doc.get("seed", 0)),
        out_dir=str(doc.get("out_dir", "out")),
        threads=threads,
        deterministic=bool(doc.get("deterministic", True)),
        scene=_parse_scene(doc["scene"]),
        cameras=_parse_cameras(doc.get("cameras", {})),
        recon=_parse_recon(doc.get("recon", {})),
        consistency=_parse_consistency(doc.get("consistency", {})),
        training=_parse_training(doc.get("training", {})),
        decouple=_parse_decouple(doc.get("decouple", {})),
        eval=_parse_eval(doc.get("eval", {})),
        nbv=_parse_nbv(doc.get("nbv", {})),
        labels=_parse_labels(doc.get("labels", {})),
        raw=doc,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_config(doc)


def default_config(seed: int = 0) -> dict:
    """A complete sphere-scene config; a starting point for edits."""
    return {
        "seed": seed,
        "out_dir": "out",
        "deterministic": True,
        "scene": {
            "sdf": {"type": "sphere", "center": [0.0, 0.0, 0.0], "radius": 1.0},
            "bounding_sphere": {"center": [0.0, 0.0, 0.0], "radius": 1.3},
            "shading": {
                "albedo": {"kind": "noise", "frequency": 5.0,
                           "color_a": [0.9, 0.85, 0.8],
                           "color_b": [0.15, 0.2, 0.3], "seed": 0},
                "lights": [
                    {"direction": [0.5, 0.3, 0.8], "intensity": [0.9, 0.9, 0.85]},
                    {"direction": [-0.7, -0.2, 0.4], "intensity": [0.35, 0.35, 0.4]},
                ],
                "ambient": [0.2, 0.2, 0.2],
                "specular": {"k_s": 0.0, "shininess": 16.0},
                "background": [0.5, 0.5, 0.5],
            },
            "perturbations": [
                {"center": [0.0, 0.0, 0.0], "radius": 2.2,
                 "amplitude": 0.3, "seed": 7, "mode": "bump"},
            ],
        },
        "cameras": {"count": 20, "distance": 3.0, "fov_deg": 38.0,
                    "width": 128, "height": 128,
                    "distribution": "fibonacci"},
        "recon": {"source": "perturbed", "dims": [64, 64, 64],
                  "truncation": 0.15, "depth_noise": 0.0},
        "consistency": {"patch_size": 11, "k_best": 4,
                        "occlusion_test": True, "max_src_views": 7},
        "training": {"batch_rays": 1024, "steps_stage1": 500,
                     "steps_finetune": 300, "lr": 0.02,
                     "grid_dims": [64, 64, 64], "init_value": 0.05,
                     "seed": seed},
        "decouple": {"samples_per_view": 6144, "lambda_reg": 1e-3},
        "eval": {"n_surface_points": 8000},
        "nbv": {"n_regions": 4, "rounds": 10, "policy": "uncertainty",
                "fuse_dims": [48, 48, 48], "fuse_truncation": 0.2,
                "seed": seed},
        "labels": {"batch": 1024},
    }
