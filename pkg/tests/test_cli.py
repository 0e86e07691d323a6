import argparse
import json

import numpy as np

from pathrec.main import run
from pathrec.middleware.logging_middleware import EXIT_CONFIG, EXIT_FAILURE, EXIT_NUMERIC, EXIT_OK, LoggingMiddleware
from pathrec.models.errors import NumericAbort
from pathrec.models.scene import GridGeometry, VoxelGridField
from pathrec.services.grid_io_service import GridIOService
from pathrec.services.output_service import OutputService
from pathrec.services.scene_service import SceneService


def write_grid(path, values):
    field = VoxelGridField.filled(GridGeometry(dims=(2, 2, 1)), 0.0).with_values(np.asarray(values, dtype=np.float64))
    GridIOService.save_grid(path, field)
    return path


def test_metrics_of_identical_grids(tmp_path, capsys):
    grid = write_grid(tmp_path / "a.vgrd", [1.0, 2.0, 0.0, 4.0])
    assert run(["metrics", "--est", str(grid), "--true", str(grid)]) == EXIT_OK
    assert "eps=0 delta=0" in capsys.readouterr().out


def test_metrics_reports_relative_errors(tmp_path, capsys):
    truth = write_grid(tmp_path / "t.vgrd", [1.0, 1.0, 1.0, 1.0])
    estimate = write_grid(tmp_path / "e.vgrd", [0.5, 0.5, 1.0, 1.0])
    assert run(["metrics", "--est", str(estimate), "--true", str(truth)]) == EXIT_OK
    assert "eps=0.25 delta=0.25" in capsys.readouterr().out


def test_missing_scene_is_a_config_error(tmp_path):
    assert run(["render", "--scene", str(tmp_path / "nope.json"), "--paths", "10", "-o", str(tmp_path)]) == EXIT_CONFIG


def test_unknown_flag_exits_with_usage_error():
    assert run(["render", "--bogus"]) == 2


def test_zero_truth_is_a_config_error(tmp_path):
    zero = write_grid(tmp_path / "z.vgrd", [0.0, 0.0, 0.0, 0.0])
    assert run(["metrics", "--est", str(zero), "--true", str(zero)]) == EXIT_CONFIG


def test_render_writes_images_and_manifest(tmp_path, homogeneous_scene):
    scene_path = tmp_path / "scene.json"
    SceneService.save_scene(homogeneous_scene, scene_path)
    out = tmp_path / "out"
    code = run(["render", "--scene", str(scene_path), "--paths", "2000", "--seed", "4", "-o", str(out), "--preview"])
    assert code == EXIT_OK
    image = OutputService.load_image(out / "image_0.pfm")
    assert image.shape == (4, 4)
    assert image.sum() > 0.0
    assert (out / "image_0.pgm").exists()
    stats = json.loads((out / "store_stats.json").read_text())
    assert stats["n_paths"] == 2000
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 4


def test_middleware_maps_errors_to_exit_codes():
    def numeric(args):
        raise NumericAbort("loss is nan")

    def broken(args):
        raise RuntimeError("boom")

    args = argparse.Namespace(command="x")
    assert LoggingMiddleware("x", numeric)(args) == EXIT_NUMERIC
    assert LoggingMiddleware("x", broken)(args) == EXIT_FAILURE
    assert LoggingMiddleware("x", lambda a: None)(args) == EXIT_OK


def test_render_then_reconstruct(tmp_path, tiny_tomography_scene):
    scene_path = tmp_path / "scene.json"
    SceneService.save_scene(tiny_tomography_scene, scene_path)
    gt = tmp_path / "gt"
    assert run(["render", "--scene", str(scene_path), "--paths", "5000", "--seed", "11", "-o", str(gt)]) == EXIT_OK
    rec = tmp_path / "rec"
    code = run([
        "reconstruct", "--scene", str(scene_path), "--gt-dir", str(gt), "--mean-extinction", "1.0",
        "--paths", "1000", "--iterations", "3", "--recycle-period", "2", "--alpha", "0.1",
        "--true", str(tmp_path / "scene_cloud.vgrd"), "-o", str(rec),
    ])
    assert code == EXIT_OK
    assert GridIOService.load_grid(rec / "estimate.vgrd").dims == (2, 2, 2)
    assert len((rec / "loss.csv").read_text().splitlines()) == 4
    manifest = json.loads((rec / "manifest.json").read_text())
    assert manifest["sampling_phases"] == 2
    assert "eps" in manifest


def test_reconstruct_without_mean_extinction_is_a_config_error(tmp_path, tiny_tomography_scene):
    scene_path = tmp_path / "scene.json"
    SceneService.save_scene(tiny_tomography_scene, scene_path)
    code = run(["reconstruct", "--scene", str(scene_path), "--gt-dir", str(tmp_path), "-o", str(tmp_path / "rec")])
    assert code == EXIT_CONFIG
