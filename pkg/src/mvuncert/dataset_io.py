"""Dataset directory persistence and binary grid/image formats.

Layout: cameras.json, images/view_%04d.png (8-bit RGB),
depth/view_%04d.pfm (1-channel float32, little-endian), gt.sdfc (JSON
analytic scene), recon.sdfg (binary grid). Grid files carry magic 'SDFG'
(signed distance) or 'UNCG' (uncertainty), version 1, u32 dims, f32 bbox,
then float32 values little-endian with x varying fastest.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import CameraView
from .scene import BoundingSphere, SceneDataset
from .sdf import AnalyticSdf, TrilinearGrid, VoxelSdf


class DatasetError(Exception):
    """Raised for missing or corrupt dataset files; message carries the path."""


# ---------------------------------------------------------------------------
# grid binary format

_GRID_MAGICS = (b"SDFG", b"UNCG")


def write_grid(path, grid: TrilinearGrid, magic: bytes = b"SDFG"):
    if magic not in _GRID_MAGICS:
        raise ValueError(f"unsupported grid magic {magic!r}")
    path = Path(path)
    dims = grid.dims
    bbox = np.asarray(grid.bbox, dtype="<f4")
    values = np.asarray(grid.values, dtype="<f4").ravel(order="F")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<3I", *dims))
        f.write(bbox.tobytes())
        f.write(values.tobytes())


def read_grid(path, expect_magic: bytes | None = None):
    """Returns (values (nx,ny,nz) float32, bbox (2,3), magic)."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: missing grid file")
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic not in _GRID_MAGICS:
            raise DatasetError(f"{path}: bad magic {magic!r}")
        if expect_magic is not None and magic != expect_magic:
            raise DatasetError(
                f"{path}: expected magic {expect_magic!r}, found {magic!r}")
        version, = struct.unpack("<I", f.read(4))
        if version != 1:
            raise DatasetError(f"{path}: unsupported version {version}")
        dims = struct.unpack("<3I", f.read(12))
        bbox = np.frombuffer(f.read(24), dtype="<f4").reshape(2, 3)
        n = dims[0] * dims[1] * dims[2]
        raw = f.read(4 * n)
        if len(raw) != 4 * n:
            raise DatasetError(f"{path}: truncated grid payload")
        values = np.frombuffer(raw, dtype="<f4").reshape(dims, order="F")
    return np.ascontiguousarray(values), bbox.astype(np.float64), magic


def write_voxel_sdf(path, grid: VoxelSdf):
    write_grid(path, grid, magic=b"SDFG")


def read_voxel_sdf(path) -> VoxelSdf:
    values, bbox, _ = read_grid(path, expect_magic=b"SDFG")
    return VoxelSdf(values.shape, bbox, values)


# ---------------------------------------------------------------------------
# PFM depth maps (grayscale, little-endian, rows bottom-to-top)


def write_pfm(path, data):
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("PFM writer handles single-channel images only")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).tobytes())


def read_pfm(path):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: missing depth file")
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise DatasetError(f"{path}: not a grayscale PFM ({header!r})")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        raw = f.read(4 * w * h)
        if len(raw) != 4 * w * h:
            raise DatasetError(f"{path}: truncated PFM payload")
        data = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float64)


# ---------------------------------------------------------------------------
# images


def write_image_png(path, image):
    """Float [0,1] (H,W,3) -> 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_image_png(path):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: missing image file")
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


# ---------------------------------------------------------------------------
# point sets


def write_ply(path, points):
    points = np.atleast_2d(points)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("end_header\n")
        for p in points:
            f.write(f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g}\n")


# ---------------------------------------------------------------------------
# dataset directory


def save_dataset(ds: SceneDataset, out_dir):
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)

    cams = []
    for view in ds.views:
        cams.append({
            "id": int(view.id),
            "fx": view.K[0, 0], "fy": view.K[1, 1],
            "cx": view.K[0, 2], "cy": view.K[1, 2],
            "width": view.width, "height": view.height,
            "R": view.R.reshape(-1).tolist(),
            "t": view.t.tolist(),
        })
        if view.image is not None:
            write_image_png(out_dir / "images" / f"view_{view.id:04d}.png",
                            view.image)
        if view.depth is not None:
            write_pfm(out_dir / "depth" / f"view_{view.id:04d}.pfm",
                      view.depth)
    with open(out_dir / "cameras.json", "w") as f:
        json.dump(cams, f, indent=1)

    scene_desc = {"sdf": ds.gt_sdf.to_json(),
                  "bounding_sphere": {
                      "center": ds.bounding_sphere.center.tolist(),
                      "radius": ds.bounding_sphere.radius}}
    with open(out_dir / "gt.sdfc", "w") as f:
        json.dump(scene_desc, f, indent=1)
    if ds.recon_sdf is not None:
        write_voxel_sdf(out_dir / "recon.sdfg", ds.recon_sdf)


def load_dataset(in_dir) -> SceneDataset:
    in_dir = Path(in_dir)
    cam_path = in_dir / "cameras.json"
    if not cam_path.exists():
        raise DatasetError(f"{cam_path}: missing manifest")
    try:
        with open(cam_path) as f:
            cams = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{cam_path}: corrupt manifest ({e})") from e

    views = []
    for c in sorted(cams, key=lambda c: c["id"]):
        K = np.array([[c["fx"], 0.0, c["cx"]],
                      [0.0, c["fy"], c["cy"]],
                      [0.0, 0.0, 1.0]])
        view = CameraView(c["id"], K, np.array(c["R"]).reshape(3, 3),
                          np.array(c["t"]), int(c["width"]), int(c["height"]))
        img_path = in_dir / "images" / f"view_{view.id:04d}.png"
        if img_path.exists():
            view.image = read_image_png(img_path)
        depth_path = in_dir / "depth" / f"view_{view.id:04d}.pfm"
        if depth_path.exists():
            view.depth = read_pfm(depth_path)
        views.append(view)

    gt_path = in_dir / "gt.sdfc"
    if not gt_path.exists():
        raise DatasetError(f"{gt_path}: missing analytic scene description")
    try:
        with open(gt_path) as f:
            scene_desc = json.load(f)
        gt_sdf = AnalyticSdf.from_json(scene_desc["sdf"])
        bs = BoundingSphere(scene_desc["bounding_sphere"]["center"],
                            scene_desc["bounding_sphere"]["radius"])
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise DatasetError(f"{gt_path}: corrupt scene description ({e})") from e

    recon_path = in_dir / "recon.sdfg"
    recon = read_voxel_sdf(recon_path) if recon_path.exists() else None
    return SceneDataset(views=views, gt_sdf=gt_sdf, recon_sdf=recon,
                        bounding_sphere=bs)
