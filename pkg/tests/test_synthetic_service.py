import numpy as np
import pytest

from pathrec.models.scene import UnknownKind
from pathrec.services.scene_service import SceneService
from pathrec.services.selftest_service import SelftestService
from pathrec.services.synthetic_service import SyntheticSceneService


def test_cloud_field_peak_and_support():
    values = SyntheticSceneService.cloud_field(n=8, peak=20.0, seed=3)
    assert values.shape == (512,)
    assert values.max() == pytest.approx(20.0)
    assert values.min() == 0.0
    assert np.array_equal(values, SyntheticSceneService.cloud_field(n=8, peak=20.0, seed=3))


def test_ring_cameras_look_at_the_center():
    detectors = SyntheticSceneService.ring_detectors()
    assert len(detectors) == 9
    for d in detectors:
        to_center = np.array([0.5, 0.5, 0.5]) - np.array(d.position)
        assert np.dot(to_center / np.linalg.norm(to_center), d.direction) == pytest.approx(1.0)


def test_synthetic_scenes_are_valid():
    tomography = SyntheticSceneService.tomography_scene(n=4, peak=5.0, rows=8, cols=8)
    assert SceneService.validate_scene(tomography) == []
    assert tomography.unknown.kind == UnknownKind.tomography
    reflectometry = SyntheticSceneService.reflectometry_scene(n_spheres=4, rows=10, cols=10)
    assert SceneService.validate_scene(reflectometry) == []
    assert len(reflectometry.surfaces) == 5 + 4
    assert reflectometry.species == []
    slab = SyntheticSceneService.slab_scene()
    assert SceneService.validate_scene(slab) == []
    assert slab.grid.n_voxels == 1
    assert (slab.detectors[0].rows, slab.detectors[0].cols) == (16, 16)


def test_selftest_invariance_checks_pass():
    selftest = SelftestService(workers=2, seed=1)
    for check in (selftest.check_phase_normalization, selftest.check_recycling_identity, selftest.check_sorting_invariance):
        name, passed, detail = check()
        assert passed, f"{name}: {detail}"


def test_selftest_transmittance_and_unbiasedness_pass():
    selftest = SelftestService(workers=2, seed=2)
    name, passed, detail = selftest.check_transmittance()
    assert passed, f"{name}: {detail}"
    name, passed, detail = selftest.check_unbiasedness(n_paths=20_000, repetitions=12)
    assert passed, f"{name}: {detail}"
