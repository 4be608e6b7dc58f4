"""Continuous geometric uncertainty field and its distillation training.

A dense trilinear grid holds the field; training minimizes the mean
absolute error between interpolated field values at surface points and
their photometric-consistency pseudo labels, using a from-scratch
adaptive-moment optimizer with values projected into [0, 2] after every
step (pseudo labels are provably in that range).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .consistency import ConsistencyConfig, LabelGenerator
from .sdf import TrilinearGrid

VALUE_RANGE = (0.0, 2.0)


class UncertaintyGrid(TrilinearGrid):
    """Trainable scalar field; trilinear eval, clamped-boundary queries."""

    def __init__(self, dims, bbox, values=None, init_value=0.5):
        if values is None:
            values = np.full(tuple(int(d) for d in dims), float(init_value))
        super().__init__(dims, bbox, np.asarray(values, dtype=np.float64),
                         add_outside_distance=False)

    def project(self):
        np.clip(self.values, VALUE_RANGE[0], VALUE_RANGE[1], out=self.values)

    def copy(self) -> "UncertaintyGrid":
        return UncertaintyGrid(self.dims, self.bbox.copy(),
                               self.values.copy())


def eval_uncertainty(grid: UncertaintyGrid, points) -> np.ndarray:
    """Trilinear field values at (N,3) points (out-of-bbox clamps)."""
    return grid.eval(points)


def _corner_weights(grid: TrilinearGrid, pts):
    """Trilinear corner indices (N,8) into values.ravel() and weights (N,8).

    Coordinates are clamped like the evaluation kernel, so gradients land on
    boundary nodes for out-of-bbox points.
    """
    dims = np.array(grid.dims)
    g = (pts - grid.bbox[0]) / grid.spacing
    g = np.clip(g, 0.0, dims - 1.0)
    i0 = np.minimum(g.astype(np.int64), dims - 2)
    f = g - i0
    wx = np.stack([1 - f[:, 0], f[:, 0]], axis=-1)
    wy = np.stack([1 - f[:, 1], f[:, 1]], axis=-1)
    wz = np.stack([1 - f[:, 2], f[:, 2]], axis=-1)
    w = (wx[:, :, None, None] * wy[:, None, :, None]
         * wz[:, None, None, :]).reshape(-1, 8)
    strides = np.array([dims[1] * dims[2], dims[2], 1])
    base = i0 @ strides
    offs = np.array([dx * strides[0] + dy * strides[1] + dz
                     for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)])
    idx = base[:, None] + offs[None, :]
    return idx, w


def distill_loss(grid: UncertaintyGrid, positions, targets):
    """L1 distillation loss and its (sub)gradient w.r.t. the grid values.

    loss = mean |U(p_i) - G_i|; the subgradient at zero residual is 0;
    per-sample gradients spread onto the 8 surrounding nodes by their
    trilinear weights.
    """
    positions = np.atleast_2d(positions).astype(np.float64)
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if len(positions) == 0:
        raise ValueError("distill_loss needs a non-empty batch")
    idx, w = _corner_weights(grid, positions)
    flat = grid.values.ravel()
    u = (flat[idx] * w).sum(axis=1)
    r = u - targets
    loss = float(np.abs(r).mean())
    grad = np.zeros_like(flat)
    contrib = (np.sign(r)[:, None] * w) / len(positions)
    np.add.at(grad, idx.ravel(), contrib.ravel())
    return loss, grad.reshape(grid.dims)


@dataclass
class AdamState:
    """Adaptive-moment optimizer state over one dense parameter array."""

    shape: tuple
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.shape)
        if self.v is None:
            self.v = np.zeros(self.shape)

    def step(self, values, grad, lr, beta1, beta2, eps):
        self.t += 1
        self.m = beta1 * self.m + (1 - beta1) * grad
        self.v = beta2 * self.v + (1 - beta2) * grad * grad
        m_hat = self.m / (1 - beta1 ** self.t)
        v_hat = self.v / (1 - beta2 ** self.t)
        values -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainConfig:
    batch_rays: int = 1024
    steps_stage1: int = 5000
    steps_finetune: int = 1000
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    label_refresh: str = "every_step"   # or "cached"
    grid_dims: tuple = (64, 64, 64)
    init_value: float = 0.5

    def __post_init__(self):
        if self.batch_rays < 1 or self.steps_stage1 < 0 or self.steps_finetune < 0:
            raise ValueError("counts must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.label_refresh not in ("every_step", "cached"):
            raise ValueError(f"unknown label refresh {self.label_refresh!r}")


def _sample_ray_batch(rng, views, n):
    """Random (view id, pixel) pairs across views that carry images."""
    usable = [v for v in views if v.image is not None]
    vi = rng.integers(0, len(usable), n)
    ids = np.array([usable[i].id for i in vi], dtype=np.int64)
    px = np.empty((n, 2))
    for i, v in enumerate(vi):
        px[i, 0] = rng.integers(0, usable[v].width)
        px[i, 1] = rng.integers(0, usable[v].height)
    return ids, px


def train_on_labels(grid: UncertaintyGrid, positions, targets,
                    cfg: TrainConfig, steps: int, adam: AdamState = None):
    """Full-batch optimization on a frozen label set; returns loss trace."""
    adam = adam or AdamState(grid.values.shape)
    trace = []
    for step in range(steps):
        loss, grad = distill_loss(grid, positions, targets)
        adam.step(grid.values, grad, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        grid.project()
        trace.append((step, loss, len(targets)))
    return trace


def _train_loop(ds, geometry, grid, cfg: TrainConfig, ccfg: ConsistencyConfig,
                steps: int, images=None,
                label_hook: Optional[Callable] = None, rng=None):
    gen = LabelGenerator(ds, geometry, ccfg, images=images)
    rng = rng or np.random.default_rng(cfg.seed)
    adam = AdamState(grid.values.shape)
    trace = []
    cached = None
    skipped = 0
    for step in range(steps):
        if cfg.label_refresh == "cached" and cached is not None:
            batch = cached
        else:
            ids, px = _sample_ray_batch(rng, ds.views, cfg.batch_rays)
            batch = gen.labels_for_pixels(ids, px)
            if label_hook is not None:
                batch = label_hook(batch)
            if cfg.label_refresh == "cached":
                cached = batch
        n = len(batch["scores"])
        if n == 0:
            skipped += 1
            trace.append((step, np.nan, 0))
            continue
        loss, grad = distill_loss(grid, batch["positions"], batch["scores"])
        adam.step(grid.values, grad, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        grid.project()
        trace.append((step, loss, n))
    return trace, skipped


def train_stage1(ds, geometry, grid: UncertaintyGrid, cfg: TrainConfig,
                 ccfg: Optional[ConsistencyConfig] = None,
                 label_hook: Optional[Callable] = None):
    """Online distillation on raw images; intersections by root finding.

    Fresh pseudo labels every step (or one cached batch when configured),
    one adaptive-moment update per step, values projected into [0,2].
    Returns (grid, trace) with trace rows (step, loss, n_valid_labels).
    """
    ccfg = ccfg or ConsistencyConfig()
    if ccfg.intersection != "sample":
        ccfg = ConsistencyConfig(**{**ccfg.__dict__, "intersection": "sample"})
    trace, _ = _train_loop(ds, geometry, grid, cfg, ccfg, cfg.steps_stage1,
                           label_hook=label_hook)
    return grid, trace


def finetune_stage2(ds, geometry, grid: UncertaintyGrid, cfg: TrainConfig,
                    images, ccfg: Optional[ConsistencyConfig] = None,
                    label_hook: Optional[Callable] = None):
    """Fine-tune on processed (view-dependence-removed) images.

    Same loop as stage 1 but labels come from the substitute images and
    intersections use sphere tracing; geometry stays frozen throughout.
    steps_finetune = 0 leaves the grid untouched.
    """
    if cfg.steps_finetune == 0:
        return grid, []
    ccfg = ccfg or ConsistencyConfig()
    if ccfg.intersection != "trace":
        ccfg = ConsistencyConfig(**{**ccfg.__dict__, "intersection": "trace"})
    rng = np.random.default_rng([cfg.seed, 1])
    trace, _ = _train_loop(ds, geometry, grid, cfg, ccfg, cfg.steps_finetune,
                           images=images, label_hook=label_hook, rng=rng)
    return grid, trace


def write_loss_trace(path, trace):
    with open(path, "w") as f:
        f.write("step,loss,valid_labels\n")
        for step, loss, n in trace:
            f.write(f"{step},{loss:.9g},{n}\n")
