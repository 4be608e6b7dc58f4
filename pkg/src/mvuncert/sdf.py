"""Signed distance fields: analytic primitive trees and trilinear voxel grids.

Both field kinds share the same query surface: ``eval(points)`` over (N,3)
world coordinates returning (N,) signed distances, finite everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels


def _as_points(x):
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if pts.shape[-1] != 3:
        raise ValueError(f"expected (N,3) points, got shape {pts.shape}")
    return pts


# ---------------------------------------------------------------------------
# analytic primitive tree


class SdfNode:
    """Base class for nodes of an analytic SDF expression tree."""

    def eval(self, pts):
        raise NotImplementedError

    def to_json(self):
        raise NotImplementedError


@dataclass
class Sphere(SdfNode):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def eval(self, pts):
        return np.linalg.norm(pts - self.center, axis=-1) - self.radius

    def to_json(self):
        return {"type": "sphere", "center": self.center.tolist(),
                "radius": float(self.radius)}


@dataclass
class Box(SdfNode):
    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)
        if np.any(self.half_extents <= 0):
            raise ValueError("box half-extents must be positive")

    def eval(self, pts):
        q = np.abs(pts - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def to_json(self):
        return {"type": "box", "center": self.center.tolist(),
                "half_extents": self.half_extents.tolist()}


@dataclass
class Torus(SdfNode):
    """Torus around the z axis through `center`; radii = (major, minor)."""

    center: np.ndarray
    radii: tuple

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radii[0] <= 0 or self.radii[1] <= 0:
            raise ValueError("torus radii must be positive")

    def eval(self, pts):
        p = pts - self.center
        ring = np.hypot(np.hypot(p[..., 0], p[..., 1]) - self.radii[0],
                        p[..., 2])
        return ring - self.radii[1]

    def to_json(self):
        return {"type": "torus", "center": self.center.tolist(),
                "radii": [float(self.radii[0]), float(self.radii[1])]}


@dataclass
class Union(SdfNode):
    children: list

    def eval(self, pts):
        d = self.children[0].eval(pts)
        for c in self.children[1:]:
            d = np.minimum(d, c.eval(pts))
        return d

    def to_json(self):
        return {"type": "union", "children": [c.to_json() for c in self.children]}


@dataclass
class Intersection(SdfNode):
    children: list

    def eval(self, pts):
        d = self.children[0].eval(pts)
        for c in self.children[1:]:
            d = np.maximum(d, c.eval(pts))
        return d

    def to_json(self):
        return {"type": "intersection",
                "children": [c.to_json() for c in self.children]}


@dataclass
class Difference(SdfNode):
    """First child minus the union of the rest."""

    children: list

    def eval(self, pts):
        d = self.children[0].eval(pts)
        for c in self.children[1:]:
            d = np.maximum(d, -c.eval(pts))
        return d

    def to_json(self):
        return {"type": "difference",
                "children": [c.to_json() for c in self.children]}


@dataclass
class SmoothUnion(SdfNode):
    """Polynomial smooth minimum with blend radius k."""

    children: list
    k: float = 0.1

    def eval(self, pts):
        if self.k <= 0:
            raise ValueError("smooth-union blend k must be positive")
        d = self.children[0].eval(pts)
        for c in self.children[1:]:
            d2 = c.eval(pts)
            h = np.clip(0.5 + 0.5 * (d2 - d) / self.k, 0.0, 1.0)
            d = d2 * (1.0 - h) + d * h - self.k * h * (1.0 - h)
        return d

    def to_json(self):
        return {"type": "smooth_union", "k": float(self.k),
                "children": [c.to_json() for c in self.children]}


_COMBINATORS = {"union": Union, "intersection": Intersection,
                "difference": Difference, "smooth_union": SmoothUnion}


def node_from_json(spec: dict) -> SdfNode:
    kind = spec.get("type")
    if kind == "sphere":
        return Sphere(spec["center"], spec["radius"])
    if kind == "box":
        return Box(spec["center"], spec["half_extents"])
    if kind == "torus":
        return Torus(spec["center"], tuple(spec["radii"]))
    if kind in _COMBINATORS:
        children = [node_from_json(c) for c in spec["children"]]
        if not children:
            raise ValueError(f"{kind} node needs at least one child")
        if kind == "smooth_union":
            return SmoothUnion(children, k=spec.get("k", 0.1))
        return _COMBINATORS[kind](children)
    raise ValueError(f"unknown SDF node type: {kind!r}")


class AnalyticSdf:
    """Queryable analytic SDF built from a primitive expression tree."""

    def __init__(self, root: SdfNode):
        self.root = root

    def eval(self, points) -> np.ndarray:
        return self.root.eval(_as_points(points))

    def eval_one(self, point) -> float:
        return float(self.eval(point)[0])

    def gradient(self, points, h: float = 1e-5) -> np.ndarray:
        """Central-difference gradient, (N,3)."""
        pts = _as_points(points)
        grad = np.empty_like(pts)
        for ax in range(3):
            e = np.zeros(3)
            e[ax] = h
            grad[:, ax] = (self.root.eval(pts + e) - self.root.eval(pts - e)) / (2 * h)
        return grad

    def to_json(self) -> dict:
        return self.root.to_json()

    @classmethod
    def from_json(cls, spec: dict) -> "AnalyticSdf":
        return cls(node_from_json(spec))


# ---------------------------------------------------------------------------
# trilinear voxel grids


@dataclass
class TrilinearGrid:
    """Node-centered scalar grid over an axis-aligned bbox, trilinear queries.

    Values live at dims[i] nodes per axis spanning bbox exactly. Out-of-bbox
    queries clamp to the boundary; subclasses choose whether to add the
    Euclidean clamp distance on top (signed-distance semantics).
    """

    dims: tuple
    bbox: np.ndarray  # (2,3) [min; max]
    values: np.ndarray
    add_outside_distance: bool = field(default=False)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)
        if any(d < 2 for d in self.dims):
            raise ValueError("grid needs at least 2 nodes per axis")
        if not np.all(self.bbox[0] < self.bbox[1]):
            raise ValueError("bbox min must be < max componentwise")
        self.values = np.ascontiguousarray(self.values).reshape(self.dims)

    @property
    def spacing(self) -> np.ndarray:
        return (self.bbox[1] - self.bbox[0]) / (np.array(self.dims) - 1)

    @property
    def _inv_spacing(self) -> np.ndarray:
        return 1.0 / self.spacing

    def node_coords(self):
        """World coordinates of all grid nodes, (N,3) with x varying fastest."""
        axes = [np.linspace(self.bbox[0][i], self.bbox[1][i], self.dims[i])
                for i in range(3)]
        zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=-1)

    def eval(self, points) -> np.ndarray:
        pts = _as_points(points)
        out = np.empty(len(pts), dtype=np.float64)
        _kernels.grid_eval(self.values, self.bbox[0], self._inv_spacing,
                           np.ascontiguousarray(pts), self.add_outside_distance,
                           out)
        return out

    def eval_one(self, point) -> float:
        return float(self.eval(point)[0])

    def eval_with_gradient(self, points):
        """Value and exact gradient of the trilinear interpolant, (N,), (N,3).

        The clamp-distance term of out-of-bbox queries is not differentiated;
        gradients are exact strictly inside the bbox.
        """
        pts = np.ascontiguousarray(_as_points(points))
        val = np.empty(len(pts), dtype=np.float64)
        grad = np.empty((len(pts), 3), dtype=np.float64)
        _kernels.grid_eval_grad(self.values, self.bbox[0], self._inv_spacing,
                                pts, val, grad)
        return val, grad

    def gradient(self, points, h: float | None = None) -> np.ndarray:
        """Central-difference gradient; h defaults to half the voxel spacing."""
        if h is None:
            h = 0.5 * float(self.spacing.min())
        pts = _as_points(points)
        grad = np.empty_like(pts)
        for ax in range(3):
            e = np.zeros(3)
            e[ax] = h
            grad[:, ax] = (self.eval(pts + e) - self.eval(pts - e)) / (2 * h)
        return grad


class VoxelSdf(TrilinearGrid):
    """Discretized SDF; queries outside the bbox stay >= the true distance."""

    def __init__(self, dims, bbox, values):
        super().__init__(dims, bbox,
                         np.asarray(values, dtype=np.float32),
                         add_outside_distance=True)

    @classmethod
    def from_sampling(cls, src, dims, bbox) -> "VoxelSdf":
        """Sample any field with .eval onto a grid of the given shape."""
        grid = cls(dims, bbox, np.zeros(dims, dtype=np.float32))
        pts = grid.node_coords()
        vals = src.eval(pts)
        # node_coords orders x fastest -> Fortran ravel of the (nx,ny,nz) array
        grid.values = np.ascontiguousarray(
            vals.astype(np.float32).reshape(grid.dims, order="F"))
        return grid
