import json

import numpy as np
import pytest

from pathrec.models.errors import GridFormatError
from pathrec.models.scene import GridGeometry, LengthUnit, VoxelGridField
from pathrec.services.grid_io_service import HEADER_SIZE, GridIOService
from pathrec.services.output_service import OutputService


def test_grid_round_trip_is_bit_identical(tmp_path):
    geometry = GridGeometry(dims=(3, 2, 4), origin=(1.0, -2.0, 0.5), voxel_size=(0.1, 0.2, 0.3), unit=LengthUnit.km)
    values = np.random.default_rng(0).random(geometry.n_voxels).astype(np.float32).astype(np.float64)
    field = VoxelGridField.filled(geometry, 0.0).with_values(values)
    GridIOService.save_grid(tmp_path / "g.vgrd", field)
    loaded = GridIOService.load_grid(tmp_path / "g.vgrd")
    assert loaded.dims == (3, 2, 4)
    assert loaded.unit == LengthUnit.km
    assert loaded.origin == pytest.approx((1.0, -2.0, 0.5))
    assert np.array_equal(loaded.values, values)


def test_single_voxel_file_size():
    field = VoxelGridField.filled(GridGeometry(dims=(1, 1, 1)), 0.0)
    data = GridIOService.encode(field)
    assert HEADER_SIZE == 69
    assert len(data) == HEADER_SIZE + 4


def test_wrong_magic_names_offset_zero():
    data = b"XXXX" + GridIOService.encode(VoxelGridField.filled(GridGeometry(dims=(1, 1, 1)), 1.0))[4:]
    with pytest.raises(GridFormatError) as info:
        GridIOService.decode(data)
    assert info.value.offset == 0


def test_truncated_payload():
    data = GridIOService.encode(VoxelGridField.filled(GridGeometry(dims=(2, 2, 2)), 1.0))
    with pytest.raises(GridFormatError, match="truncated"):
        GridIOService.decode(data[:-3])


def test_pfm_round_trip(tmp_path):
    image = np.array([[0.0, 1.5], [2.25, -3.0]])
    OutputService.emit_image(tmp_path / "a.pfm", image)
    assert (tmp_path / "a.pfm").read_bytes().startswith(b"Pf\n2 2\n-1.0\n")
    assert np.array_equal(OutputService.load_image(tmp_path / "a.pfm"), image)
    OutputService.emit_image(tmp_path / "zero.pfm", np.zeros((2, 2)))
    assert np.array_equal(OutputService.load_image(tmp_path / "zero.pfm"), np.zeros((2, 2)))


def test_non_finite_pixel_is_rejected_with_index(tmp_path):
    image = np.zeros((3, 3))
    image[1, 2] = np.nan
    with pytest.raises(ValueError, match="first at index 5"):
        OutputService.emit_image(tmp_path / "bad.pfm", image)
    assert not (tmp_path / "bad.pfm").exists()


def test_loss_csv(tmp_path):
    rows = [(0, "0.1", "3.0", 0.5, 0.1, 0), (1, "0.2", "2.0", None, None, 0), (2, "0.3", "1.0", 0.25, 0.05, 1)]
    OutputService.emit_csv(tmp_path / "loss.csv", rows)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "iter,time_s,loss,eps,delta,stage"
    assert len(lines) == 4
    assert lines[2] == "1,0.2,2.0,,,0"


def test_preview_is_binary_pgm(tmp_path):
    OutputService.emit_preview(tmp_path / "p.pgm", np.arange(6, dtype=np.float64).reshape(2, 3))
    data = (tmp_path / "p.pgm").read_bytes()
    header = b"P5\n3 2\n255\n"
    assert data.startswith(header)
    assert data[len(header)] == 0
    assert data[-1] == 255
    assert len(data) == len(header) + 6


def test_manifest_records_seed_and_versions(tmp_path):
    path = OutputService.write_manifest(tmp_path, {"seed": 7}, {"note": "x"})
    manifest = json.loads(path.read_text())
    assert manifest["config"]["seed"] == 7
    assert "numba" in manifest["versions"]
    assert manifest["note"] == "x"
