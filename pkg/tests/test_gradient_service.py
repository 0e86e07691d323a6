import numpy as np
import pytest

from pathrec.models.errors import ConfigError
from pathrec.models.path import ProblemKind
from pathrec.models.scene import UnknownSpec
from pathrec.services.gradient_service import GradientService
from pathrec.services.oracle_service import OracleService
from pathrec.services.pathstore_service import PathStoreService
from pathrec.services.scene_service import SceneService
from pathrec.services.transport_service import TransportService


def fixed_paths(scene, n_paths=4000, seed=13):
    params = SceneService.scene_params(scene)
    store = TransportService().trace_store(scene, params, n_paths, seed)
    return params, store


def fine_step(m):
    return 1e-6 * (1.0 + np.abs(m))


def assert_close_where_nonzero(numeric, analytic, rel):
    scale = float(np.abs(analytic).max())
    assert scale > 0.0
    mask = np.abs(analytic) > 1e-8 * scale
    np.testing.assert_allclose(numeric[mask], analytic[mask], rtol=rel, atol=1e-10 * scale)


def test_problem_kind(two_species_scene, phong_scene):
    assert GradientService.problem(two_species_scene) == (ProblemKind.tomography, 0)
    assert GradientService.problem(phong_scene) == (ProblemKind.phong, 0)
    broken = two_species_scene.model_copy(update={"unknown": UnknownSpec(species="smoke")})
    with pytest.raises(ConfigError):
        GradientService.problem(broken)


def test_unknowns_round_trip(two_species_scene):
    params = SceneService.scene_params(two_species_scene)
    m = GradientService.unknowns(two_species_scene, params)
    assert m.shape == (64,)
    again = GradientService.with_unknowns(two_species_scene, params, m * 2.0)
    np.testing.assert_allclose(again.beta[0], 2.0 * params.beta[0])
    np.testing.assert_array_equal(again.beta[1], params.beta[1])


def test_tomography_jacobian_matches_central_differences(tiny_tomography_scene):
    scene = tiny_tomography_scene
    params, store = fixed_paths(scene)
    forward = GradientService().grad_forward(store, scene, params, params)
    analytic = GradientService.detector_sum_gradient(forward, [0])
    recycler = PathStoreService()

    def total(m):
        out = recycler.recycled_render(store, scene, GradientService.with_unknowns(scene, params, m), params)
        return float(out.images[0].sum())

    numeric = OracleService.finite_difference_grad(total, GradientService.unknowns(scene, params), h_rule=fine_step).to_dense()
    assert_close_where_nonzero(numeric, analytic, rel=1e-6)


def test_phong_jacobian_matches_central_differences(phong_scene):
    params, store = fixed_paths(phong_scene, n_paths=3000, seed=5)
    forward = GradientService().grad_forward(store, phong_scene, params, params)
    assert forward.jacobian.shape == (36, 2)
    analytic = GradientService.detector_sum_gradient(forward, [0])
    recycler = PathStoreService()

    def total(m):
        out = recycler.recycled_render(store, phong_scene, GradientService.with_unknowns(phong_scene, params, m), params)
        return float(out.images[0].sum())

    numeric = OracleService.finite_difference_grad(
        total, GradientService.unknowns(phong_scene, params), h_rule=fine_step, kind=ProblemKind.phong
    ).to_dense()
    assert_close_where_nonzero(numeric, analytic, rel=1e-6)


def test_fused_gradient_matches_jacobian(tiny_tomography_scene):
    scene = tiny_tomography_scene
    params, store = fixed_paths(scene)
    service = GradientService(workers=2)
    gt = [np.full((4, 4), 0.01) for _ in scene.detectors]
    loss, gradient, output = service.loss_and_gradient(store, scene, params, params, gt)
    forward = service.grad_forward(store, scene, params, params)
    residual = GradientService.residual(forward.images, gt)
    assert loss == pytest.approx(0.5 * float(residual @ residual), rel=1e-12)
    np.testing.assert_allclose(
        gradient.to_dense(), GradientService.loss_gradient(forward, gt).to_dense(), rtol=1e-9, atol=1e-14
    )
    for a, b in zip(output.images, forward.images):
        np.testing.assert_array_equal(a, b)


def test_loss_gradient_matches_central_differences_away_from_reference(tiny_tomography_scene):
    scene = tiny_tomography_scene
    params, store = fixed_paths(scene)
    m0 = GradientService.unknowns(scene, params)
    current = GradientService.with_unknowns(scene, params, m0 * 1.2)
    service = GradientService()
    gt = [np.zeros((4, 4)) for _ in scene.detectors]
    _, gradient, _ = service.loss_and_gradient(store, scene, current, params, gt)

    def loss(m):
        return service.loss_and_gradient(store, scene, GradientService.with_unknowns(scene, params, m), params, gt)[0]

    numeric = OracleService.finite_difference_grad(loss, m0 * 1.2, h_rule=fine_step).to_dense()
    assert_close_where_nonzero(numeric, gradient.to_dense(), rel=1e-6)


def test_path_score_of_single_event(tiny_tomography_scene):
    scene = tiny_tomography_scene
    params, store = fixed_paths(scene, n_paths=200)
    record = next(store.record(p) for p in range(store.n_paths) if store.record(p).local_estimates)
    score = GradientService.psf_tomography(scene, params, record, 0)
    assert score.size == scene.grid.n_voxels
    assert np.all(np.isfinite(score.values))


def test_residual_shape_mismatch(two_species_scene):
    with pytest.raises(ConfigError):
        GradientService.residual([np.zeros((4, 4))], [np.zeros((4, 4)), np.zeros((4, 4))])
    with pytest.raises(ConfigError):
        GradientService.residual([np.zeros((4, 4))], [np.zeros((2, 2))])


def test_detector_gradient_is_linear_in_residual(tiny_tomography_scene):
    scene = tiny_tomography_scene
    params, store = fixed_paths(scene)
    service = GradientService()
    rng = np.random.default_rng(3)
    gt_a = [rng.random((4, 4)) * 0.02 for _ in scene.detectors]
    gt_b = [rng.random((4, 4)) * 0.02 for _ in scene.detectors]
    # residual(2 gt_a - gt_b) = 2 residual(gt_a) - residual(gt_b)
    gt_mix = [2.0 * a - b for a, b in zip(gt_a, gt_b)]

    def gradient(gt):
        return service.loss_and_gradient(store, scene, params, params, gt)[1].to_dense()

    g_a = gradient(gt_a)
    g_b = gradient(gt_b)
    scale = float(np.abs(g_a).max() + np.abs(g_b).max())
    np.testing.assert_allclose(gradient(gt_mix), 2.0 * g_a - g_b, rtol=1e-9, atol=1e-12 * scale)

    forward = service.grad_forward(store, scene, params, params)
    residual = GradientService.residual(forward.images, gt_a)
    np.testing.assert_allclose(g_a, np.asarray(forward.jacobian.T @ residual).ravel(), rtol=1e-9, atol=1e-12 * scale)
