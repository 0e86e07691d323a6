import math

import numpy as np
import pytest
from pydantic import ValidationError

from pathrec.models.errors import ConfigError, NumericAbort
from pathrec.models.inverse import AdamConfig, OptState, Schedule, Stage
from pathrec.models.path import ProblemKind
from pathrec.models.scene import GridGeometry
from pathrec.services.gradient_service import GradientService
from pathrec.services.grid_io_service import GridIOService
from pathrec.services.inverse_service import InverseService
from pathrec.services.scene_service import SceneService
from pathrec.services.synthetic_service import SyntheticSceneService
from pathrec.services.transport_service import TransportService


@pytest.fixture
def toy_problem(tiny_tomography_scene):
    truth = GradientService.unknowns(tiny_tomography_scene, SceneService.scene_params(tiny_tomography_scene))
    gt, _ = TransportService().render(tiny_tomography_scene, None, 20_000, seed=77)
    start = SyntheticSceneService.tomography_scene(n=2, values=np.full(8, 0.5), rows=4, cols=4)
    return start, gt.images, truth


def test_loss_is_half_squared_distance():
    a = [np.array([[1.0, 2.0]]), np.array([[0.0]])]
    b = [np.array([[0.0, 0.0]]), np.array([[2.0]])]
    assert InverseService.loss(a, b) == pytest.approx(0.5 * (1.0 + 4.0 + 4.0))
    assert InverseService.loss(a, a) == 0.0


def test_adam_first_step_moves_by_alpha():
    state = OptState.start(np.ones(3))
    stepped = InverseService.adam_step(state, np.array([2.0, -3.0, 0.0]), AdamConfig(alpha=0.1))
    np.testing.assert_allclose(stepped.m, [0.9, 1.1, 1.0], rtol=1e-6)
    assert stepped.t == 1
    assert state.t == 0


def test_adam_constant_gradient_steps_by_alpha():
    config = AdamConfig(alpha=0.05, epsilon=1e-12)
    gradient = np.array([4.0, -0.25, 1e-3])
    state = OptState.start(np.full(3, 10.0))
    for _ in range(5):
        previous = state.m
        state = InverseService.adam_step(state, gradient, config)
        np.testing.assert_allclose(state.m - previous, -config.alpha * np.sign(gradient), rtol=1e-6)
    np.testing.assert_allclose(state.m, 10.0 - 5 * config.alpha * np.sign(gradient), rtol=1e-9)


def test_adam_zero_gradient_is_identity():
    m = np.array([0.3, 2.0, 7.5])
    state = OptState.start(m)
    for _ in range(3):
        state = InverseService.adam_step(state, np.zeros(3), AdamConfig(alpha=0.5))
    np.testing.assert_array_equal(state.m, m)
    assert state.t == 3


def test_adam_projects_onto_bounds():
    lower, upper = InverseService.bounds(ProblemKind.phong, 2)
    state = OptState.start(np.array([0.95, 0.05]))
    stepped = InverseService.adam_step(state, np.array([-1.0, 1.0]), AdamConfig(alpha=0.1), lower, upper)
    np.testing.assert_allclose(stepped.m, [1.0, 0.0])
    free = InverseService.adam_step(state, np.array([-1.0, 1.0]), AdamConfig(alpha=0.1, project=False), lower, upper)
    assert free.m[0] > 1.0 and free.m[1] < 0.0


def test_adam_rejects_mismatched_gradient():
    with pytest.raises(ConfigError):
        InverseService.adam_step(OptState.start(np.ones(3)), np.ones(2), AdamConfig())


def test_adam_step_scale_per_unknown():
    config = AdamConfig(alpha=0.01, step_scale=(1.0, 100.0))
    stepped = InverseService.adam_step(OptState.start(np.array([0.5, 10.0])), np.array([-1.0, -2.0]), config)
    np.testing.assert_allclose(stepped.m, [0.51, 11.0], rtol=1e-6)
    with pytest.raises(ConfigError):
        InverseService.adam_step(OptState.start(np.ones(3)), np.ones(3), config)
    with pytest.raises(ValidationError):
        AdamConfig(step_scale=(1.0, 0.0))


def test_metrics():
    truth = np.array([1.0, 2.0, 3.0, 0.0])
    assert InverseService.metrics(truth, truth) == (0.0, 0.0)
    eps, delta = InverseService.metrics(np.array([2.0, 2.0, 3.0, 1.0]), truth)
    assert eps == pytest.approx(2.0 / 6.0)
    assert delta == pytest.approx(-2.0 / 6.0)
    eps, delta = InverseService.metrics(np.zeros(4), truth)
    assert (eps, delta) == (1.0, 1.0)


def test_metrics_are_scale_invariant():
    rng = np.random.default_rng(11)
    truth = rng.random(50) * 20.0
    estimate = truth + rng.normal(0.0, 1.0, 50)
    reference = InverseService.metrics(estimate, truth)
    for c in (1e-3, 0.5, 7.0, 1e4):
        assert InverseService.metrics(c * estimate, c * truth) == pytest.approx(reference, rel=1e-9, abs=1e-12)


def test_metrics_errors():
    with pytest.raises(ConfigError):
        InverseService.metrics(np.ones(3), np.zeros(3))
    with pytest.raises(ConfigError):
        InverseService.metrics(np.ones(3), np.ones(4))


def test_downsample_sums_blocks():
    image = np.arange(16, dtype=np.float64).reshape(4, 4)
    small = InverseService.downsample(image, 2, 2)
    np.testing.assert_array_equal(small, [[10.0, 18.0], [42.0, 50.0]])
    assert small.sum() == image.sum()
    with pytest.raises(ConfigError):
        InverseService.downsample(image, 3, 3)


def test_stage_parsing_and_order():
    stages = Schedule.parse_stages("30x30:1e6, 60x60:2000000")
    assert stages == [Stage(rows=30, cols=30, n_paths=1_000_000), Stage(rows=60, cols=60, n_paths=2_000_000)]
    with pytest.raises(ValidationError):
        Schedule(stages=list(reversed(stages)))
    with pytest.raises(ValidationError):
        Schedule(stages=[])


def test_space_carving_needs_two_views(homogeneous_scene):
    with pytest.raises(ConfigError):
        InverseService.space_carve(homogeneous_scene, [np.ones((4, 4))])


def test_space_carving_finds_the_cloud():
    values = np.zeros(64)
    values[GridGeometry(dims=(4, 4, 4)).flat_index(1, 1, 1)] = 10.0
    scene = SyntheticSceneService.tomography_scene(n=4, values=values, rows=8, cols=8, air=False)
    gt, _ = TransportService().render(scene, None, 20_000, seed=3)
    mask, initial = InverseService.space_carve(scene, gt.images, mean_extinction=5.0, dilation=0)
    assert mask[scene.grid.flat_index(1, 1, 1)]
    assert mask.sum() < mask.size
    assert set(np.unique(initial)) <= {0.0, 5.0}


def test_reconstruction_resamples_on_schedule(tmp_path, toy_problem):
    start, gt, truth = toy_problem
    schedule = Schedule(recycle_period=3, stages=[Stage(rows=4, cols=4, n_paths=2000)], max_iterations=7)
    result = InverseService().reconstruct(
        start, gt, AdamConfig(alpha=0.1), schedule, seed=5, truth=truth, out_dir=tmp_path, checkpoint_every=5
    )
    assert result.sampling_phases == math.ceil(7 / 3)
    assert [r.resampled for r in result.history] == [True, False, False, True, False, False, True]
    assert np.all(result.m >= 0.0)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "iter,time_s,loss,eps,delta,stage"
    assert len(lines) == 8
    checkpoint = GridIOService.load_grid(tmp_path / "checkpoint_00005.vgrd")
    assert checkpoint.dims == (2, 2, 2)
    assert [r.phase for r in result.history] == [0, 0, 0, 1, 1, 1, 2]
    rows = (tmp_path / "checkpoints.csv").read_text().splitlines()
    assert rows[0] == "iter,time_s,loss,eps,delta,stage,phase"
    assert len(rows) == 2
    fields = rows[1].split(",")
    assert fields[0] == "4"
    assert fields[-2:] == ["0", "1"]


def test_reconstruction_lowers_the_loss(toy_problem):
    start, gt, truth = toy_problem
    schedule = Schedule(recycle_period=10, stages=[Stage(rows=4, cols=4, n_paths=4000)], max_iterations=40)
    result = InverseService().reconstruct(start, gt, AdamConfig(alpha=0.1), schedule, seed=9, truth=truth)
    assert result.loss_history[-1] < result.loss_history[0]
    assert result.history[-1].eps < result.history[0].eps


def test_stage_advances_when_loss_saturates(toy_problem):
    start, gt, _ = toy_problem
    schedule = Schedule(
        recycle_period=3,
        stages=[Stage(rows=2, cols=2, n_paths=500), Stage(rows=4, cols=4, n_paths=1000)],
        max_iterations=6,
        saturation_window=1,
        saturation_threshold=1.0,
    )
    result = InverseService().reconstruct(start, gt, AdamConfig(alpha=0.05), schedule, seed=1)
    assert result.stage_changes == [2]
    assert [r.stage for r in result.history] == [0, 0, 1, 1, 1, 1]


def test_non_finite_loss_aborts(toy_problem):
    start, gt, _ = toy_problem
    broken = [image.copy() for image in gt]
    broken[0][0, 0] = np.nan
    schedule = Schedule(recycle_period=5, stages=[Stage(rows=4, cols=4, n_paths=500)], max_iterations=3)
    with pytest.raises(NumericAbort):
        InverseService().reconstruct(start, broken, AdamConfig(alpha=0.1), schedule, seed=1)
