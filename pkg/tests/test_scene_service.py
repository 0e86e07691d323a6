import math

import numpy as np
import pytest
from scipy import stats

from pathrec.models.errors import ConfigError, SceneDomainError
from pathrec.models.scene import (
    GridGeometry,
    ParticleSpecies,
    PhaseFunction,
    PhaseKind,
    PhongBRDF,
    Scene,
    VoxelGridField,
)
from pathrec.services.scene_service import SceneService
from tests.conftest import cloud_and_air


def test_extinction_sums_species():
    total, per_species = SceneService.extinction_at(cloud_and_air(127.0, 0.04), (0.5, 0.5, 0.5))
    assert total == pytest.approx(127.04)
    assert per_species.tolist() == pytest.approx([127.0, 0.04])


def test_extinction_of_empty_voxel_is_zero():
    total, _ = SceneService.extinction_at(cloud_and_air(0.0, 0.0), (0.2, 0.2, 0.2))
    assert total == 0.0


def test_extinction_outside_bounds_raises(homogeneous_scene):
    with pytest.raises(SceneDomainError):
        SceneService.extinction_at(homogeneous_scene, (1.5, 0.5, 0.5))


def test_effective_albedo_mixture():
    albedo = SceneService.effective_albedo(cloud_and_air(127.0, 0.04), (0.5, 0.5, 0.5))
    assert albedo == pytest.approx((0.99 * 127.0 + 0.912 * 0.04) / 127.04, rel=1e-12)
    assert albedo == pytest.approx(0.989975, abs=1e-6)


def test_effective_albedo_symmetric_and_vacuum():
    scene = cloud_and_air(2.0, 2.0, albedo_cloud=1.0, albedo_air=0.0)
    assert SceneService.effective_albedo(scene, (0.5, 0.5, 0.5)) == pytest.approx(0.5)
    assert SceneService.effective_albedo(cloud_and_air(0.0, 0.0), (0.5, 0.5, 0.5)) == 0.0


@pytest.mark.parametrize(
    "phase",
    [PhaseFunction(kind=PhaseKind.hg, g=g) for g in (0.0, 0.5, 0.85, -0.3)] + [PhaseFunction(kind=PhaseKind.rayleigh)],
)
def test_phase_functions_are_normalized(phase):
    assert SceneService.phase_normalization(phase) == pytest.approx(1.0, abs=1e-6)


def test_phase_values():
    isotropic = PhaseFunction(kind=PhaseKind.hg, g=0.0)
    assert SceneService.phase_eval(isotropic, 0.3) == pytest.approx(1.0 / (4.0 * math.pi))
    rayleigh = PhaseFunction(kind=PhaseKind.rayleigh)
    assert SceneService.phase_eval(rayleigh, 1.0) == pytest.approx(3.0 / (8.0 * math.pi))
    forward = PhaseFunction(kind=PhaseKind.hg, g=0.85)
    assert SceneService.phase_eval(forward, 1.0) > SceneService.phase_eval(forward, -1.0)


def test_mixture_phase_weights_by_scattering():
    scene = cloud_and_air(2.0, 2.0, albedo_cloud=1.0, albedo_air=0.0)
    value = SceneService.mixture_phase_eval(scene, (0.5, 0.5, 0.5), 0.4)
    assert value == pytest.approx(SceneService.phase_eval(PhaseFunction(), 0.4))


def test_mixture_phase_without_scattering_raises():
    with pytest.raises(SceneDomainError):
        SceneService.mixture_phase_eval(cloud_and_air(0.0, 0.0), (0.5, 0.5, 0.5), 0.0)


def test_phase_sampling_matches_density():
    phase = PhaseFunction(kind=PhaseKind.hg, g=0.6)
    mu, phi = SceneService.phase_sample(phase, np.random.default_rng(11), size=200_000)
    edges = np.linspace(-1.0, 1.0, 21)
    observed, _ = np.histogram(mu, bins=edges)
    g = phase.g

    def cdf(x):
        return (1.0 - g * g) / (2.0 * g) * (1.0 / np.sqrt(1.0 + g * g - 2.0 * g * x) - 1.0 / (1.0 + g))

    expected = np.diff(cdf(edges)) * mu.size
    _, p_value = stats.chisquare(observed, expected * observed.sum() / expected.sum())
    assert p_value > 1e-3
    assert np.all((phi >= 0.0) & (phi < 2.0 * math.pi))


def test_phong_brdf():
    brdf = PhongBRDF(kappa_s=0.7, gamma=50.0)
    omega = np.array([0.0, 0.0, 1.0])
    assert SceneService.brdf_eval_phong(brdf, omega, omega) == pytest.approx(1.0)
    assert SceneService.brdf_eval_phong(brdf, omega, np.array([1.0, 0.0, 0.0])) == pytest.approx(0.3)
    assert SceneService.brdf_eval_phong(PhongBRDF(kappa_s=0.0), omega, np.array([0.6, 0.0, 0.8])) == 1.0


def test_validate_scene_reports_violations(homogeneous_scene):
    assert SceneService.validate_scene(homogeneous_scene) == []
    bad = homogeneous_scene.model_copy(
        update={"species": [homogeneous_scene.species[0].model_copy(update={"albedo": 1.5})], "detectors": []}
    )
    violations = SceneService.validate_scene(bad)
    assert any("albedo" in v for v in violations)
    assert any("detector" in v for v in violations)


def test_scene_round_trip(tmp_path, two_species_scene):
    SceneService.save_scene(two_species_scene, tmp_path / "scene.json")
    loaded = SceneService.load_scene(tmp_path / "scene.json")
    np.testing.assert_allclose(
        SceneService.scene_params(loaded).beta, SceneService.scene_params(two_species_scene).beta, rtol=1e-6
    )
    assert len(loaded.detectors) == 2


def test_missing_scene_file(tmp_path):
    with pytest.raises(ConfigError, match="missing.json"):
        SceneService.load_scene(tmp_path / "missing.json")


def test_rayleigh_sampling_matches_density():
    rayleigh = PhaseFunction(kind=PhaseKind.rayleigh)
    mu, _ = SceneService.phase_sample(rayleigh, np.random.default_rng(12), size=200_000)
    assert np.all(np.abs(mu) <= 1.0)
    edges = np.linspace(-1.0, 1.0, 21)
    observed, _ = np.histogram(mu, bins=edges)

    def cdf(x):
        return (x ** 3 + 3.0 * x + 4.0) / 8.0

    expected = np.diff(cdf(edges)) * mu.size
    _, p_value = stats.chisquare(observed, expected)
    assert p_value > 0.01


@pytest.mark.parametrize("g", [0.85, 0.3, -0.5])
def test_hg_sample_mean_is_asymmetry(g):
    mu, _ = SceneService.phase_sample(PhaseFunction(kind=PhaseKind.hg, g=g), np.random.default_rng(13), size=1_000_000)
    error = mu.std(ddof=1) / math.sqrt(mu.size)
    assert abs(mu.mean() - g) <= 3.0 * error


@pytest.mark.parametrize("kappa_s", [0.0, 0.5, 1.0])
@pytest.mark.parametrize("gamma", [0.0, 1.0, 10.0, 50.0])
@pytest.mark.parametrize("incident", [(0.0, 0.0, -1.0), (0.6, 0.0, -0.8), (0.99, 0.0, -0.141)])
def test_phong_energy_is_bounded(kappa_s, gamma, incident):
    energy = SceneService.brdf_energy(PhongBRDF(kappa_s=kappa_s, gamma=gamma), incident)
    assert 0.0 < energy <= 1.0 + 1e-6


def test_lambertian_energy_is_one():
    assert SceneService.brdf_energy(PhongBRDF(kappa_s=0.0), (0.0, 0.0, -1.0)) == pytest.approx(1.0, abs=1e-9)


def test_validate_scene_names_negative_voxel(homogeneous_scene):
    geometry = GridGeometry(dims=(2, 2, 2), voxel_size=(0.5, 0.5, 0.5))
    values = np.ones(8)
    values[0] = -1.0
    species = ParticleSpecies(name="cloud", extinction=VoxelGridField.filled(geometry, 0.0).with_values(values), albedo=0.9)
    violations = SceneService.validate_scene(homogeneous_scene.model_copy(update={"species": [species]}))
    assert len(violations) == 1
    assert "(0, 0, 0)" in violations[0]


def test_validate_scene_rejects_mismatched_grids(homogeneous_scene):
    coarse = GridGeometry(dims=(1, 1, 1))
    fine = GridGeometry(dims=(2, 2, 2), voxel_size=(0.5, 0.5, 0.5))
    species = [
        ParticleSpecies(name="cloud", extinction=VoxelGridField.filled(coarse, 1.0), albedo=0.9),
        ParticleSpecies(name="haze", extinction=VoxelGridField.filled(fine, 0.1), albedo=0.9),
    ]
    violations = SceneService.validate_scene(homogeneous_scene.model_copy(update={"species": species}))
    assert len(violations) == 1
    assert "haze" in violations[0]
