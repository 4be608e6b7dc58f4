import json
import struct

import numpy as np
import pytest

from mvuncert.dataset_io import (DatasetError, load_dataset, read_grid,
                                 read_pfm, save_dataset, write_grid,
                                 write_pfm, write_ply)
from mvuncert.sdf import VoxelSdf
from mvuncert.uncertainty import UncertaintyGrid


class TestGridFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        vals = rng.uniform(-1, 1, (5, 6, 7)).astype(np.float32)
        g = VoxelSdf((5, 6, 7), [[-1, -1, -1], [1, 1, 1]], vals)
        write_grid(tmp_path / "g.sdfg", g)
        back, bbox, magic = read_grid(tmp_path / "g.sdfg")
        assert magic == b"SDFG"
        np.testing.assert_array_equal(back, vals)
        np.testing.assert_allclose(bbox, [[-1, -1, -1], [1, 1, 1]], atol=1e-7)

    def test_layout_x_fastest(self, tmp_path):
        # 2x2x2 grid with distinct values; verify byte order manually
        vals = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        g = VoxelSdf((2, 2, 2), [[0, 0, 0], [1, 1, 1]], vals)
        write_grid(tmp_path / "g.sdfg", g)
        raw = (tmp_path / "g.sdfg").read_bytes()
        assert raw[:4] == b"SDFG"
        version, nx, ny, nz = struct.unpack("<4I", raw[4:20])
        assert (version, nx, ny, nz) == (1, 2, 2, 2)
        payload = np.frombuffer(raw[20 + 24:], dtype="<f4")
        # x fastest: values[x, y, z] at index x + nx*(y + ny*z)
        expect = [vals[x, y, z] for z in range(2) for y in range(2)
                  for x in range(2)]
        np.testing.assert_array_equal(payload, expect)

    def test_uncg_magic_guard(self, tmp_path):
        g = UncertaintyGrid((3, 3, 3), [[0, 0, 0], [1, 1, 1]])
        write_grid(tmp_path / "u.uncg", g, magic=b"UNCG")
        _, _, magic = read_grid(tmp_path / "u.uncg")
        assert magic == b"UNCG"
        with pytest.raises(DatasetError, match="expected magic"):
            read_grid(tmp_path / "u.uncg", expect_magic=b"SDFG")

    def test_corrupt_and_missing(self, tmp_path):
        with pytest.raises(DatasetError, match="missing"):
            read_grid(tmp_path / "nope.sdfg")
        (tmp_path / "bad.sdfg").write_bytes(b"JUNKxxxx")
        with pytest.raises(DatasetError, match="bad magic"):
            read_grid(tmp_path / "bad.sdfg")
        g = VoxelSdf((3, 3, 3), [[0, 0, 0], [1, 1, 1]],
                     np.zeros((3, 3, 3), np.float32))
        write_grid(tmp_path / "t.sdfg", g)
        data = (tmp_path / "t.sdfg").read_bytes()
        (tmp_path / "trunc.sdfg").write_bytes(data[:-8])
        with pytest.raises(DatasetError, match="truncated"):
            read_grid(tmp_path / "trunc.sdfg")


class TestPfm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        depth = rng.uniform(0, 5, (17, 23)).astype(np.float32)
        write_pfm(tmp_path / "d.pfm", depth)
        back = read_pfm(tmp_path / "d.pfm")
        np.testing.assert_array_equal(back.astype(np.float32), depth)

    def test_header_little_endian_bottom_up(self, tmp_path):
        depth = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        write_pfm(tmp_path / "d.pfm", depth)
        raw = (tmp_path / "d.pfm").read_bytes()
        assert raw.startswith(b"Pf\n2 2\n-1.0\n")
        vals = np.frombuffer(raw[len(b"Pf\n2 2\n-1.0\n"):], dtype="<f4")
        # bottom row first per PFM convention
        np.testing.assert_array_equal(vals, [3, 4, 1, 2])


def test_ply_writer(tmp_path):
    pts = np.array([[0.0, 1.0, 2.0], [3.5, -1.25, 0.0]])
    write_ply(tmp_path / "p.ply", pts)
    lines = (tmp_path / "p.ply").read_text().splitlines()
    assert lines[0] == "ply"
    assert "element vertex 2" in lines[2]
    assert lines[-1].split() == ["3.5", "-1.25", "0"]


class TestDatasetRoundTrip:
    def test_full_round_trip(self, tmp_path, lambert_ds):
        save_dataset(lambert_ds, tmp_path)
        back = load_dataset(tmp_path)
        assert len(back.views) == len(lambert_ds.views)
        for a, b in zip(lambert_ds.views, back.views):
            np.testing.assert_array_equal(a.K, b.K)      # bit-exact cameras
            np.testing.assert_array_equal(a.R, b.R)
            np.testing.assert_array_equal(a.t, b.t)
            assert np.abs(a.image - b.image).max() <= 1 / 255 + 1e-7
            np.testing.assert_allclose(a.depth, b.depth, atol=1e-4)
        np.testing.assert_array_equal(lambert_ds.recon_sdf.values,
                                      back.recon_sdf.values)
        # analytic SDF survives
        pts = np.random.default_rng(2).uniform(-1, 1, (50, 3))
        np.testing.assert_array_equal(lambert_ds.gt_sdf.eval(pts),
                                      back.gt_sdf.eval(pts))
        assert back.bounding_sphere.radius == lambert_ds.bounding_sphere.radius

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="missing manifest"):
            load_dataset(tmp_path)

    def test_corrupt_manifest(self, tmp_path):
        (tmp_path / "cameras.json").write_text("{not json")
        with pytest.raises(DatasetError, match="corrupt manifest"):
            load_dataset(tmp_path)

    def test_missing_scene_description(self, tmp_path, lambert_ds):
        save_dataset(lambert_ds, tmp_path)
        (tmp_path / "gt.sdfc").unlink()
        with pytest.raises(DatasetError, match="missing analytic scene"):
            load_dataset(tmp_path)

    def test_cameras_json_schema(self, tmp_path, lambert_ds):
        save_dataset(lambert_ds, tmp_path)
        cams = json.loads((tmp_path / "cameras.json").read_text())
        required = {"id", "fx", "fy", "cx", "cy", "width", "height", "R", "t"}
        for c in cams:
            assert required <= set(c)
            assert len(c["R"]) == 9 and len(c["t"]) == 3
