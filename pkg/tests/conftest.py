import math

import numpy as np
import pytest

from pathrec.models.scene import (
    Detector,
    GridGeometry,
    LightKind,
    LightSource,
    ParticleSpecies,
    PhaseFunction,
    PhaseKind,
    Scene,
    UnknownSpec,
    VoxelGridField,
)
from pathrec.services.synthetic_service import SyntheticSceneService

UNIT_BOX = {"bounds_lo": (0.0, 0.0, 0.0), "bounds_hi": (1.0, 1.0, 1.0)}
ZENITH_SUN = LightSource(kind=LightKind.sun, radiance=1.0, direction=(0.0, 0.0, -1.0))


def looking_down(rows: int = 4, cols: int = 4) -> Detector:
    return Detector(position=(0.5, 0.5, 3.0), direction=(0.0, 0.0, -1.0), up=(0.0, 1.0, 0.0), rows=rows, cols=cols, fov=0.5)


@pytest.fixture
def homogeneous_scene() -> Scene:
    species = ParticleSpecies(name="medium", extinction=2.0, albedo=0.9, phase=PhaseFunction(kind=PhaseKind.hg, g=0.0))
    return Scene(**UNIT_BOX, species=[species], light=ZENITH_SUN, detectors=[looking_down()])


@pytest.fixture
def two_species_scene() -> Scene:
    geometry = GridGeometry(dims=(4, 4, 4), voxel_size=(0.25, 0.25, 0.25))
    values = np.random.default_rng(3).uniform(0.5, 4.0, geometry.n_voxels)
    species = [
        ParticleSpecies(
            name="cloud",
            extinction=VoxelGridField.filled(geometry, 0.0).with_values(values),
            albedo=0.99,
            phase=PhaseFunction(kind=PhaseKind.hg, g=0.85),
        ),
        ParticleSpecies(name="air", extinction=0.04, albedo=0.912, phase=PhaseFunction(kind=PhaseKind.rayleigh)),
    ]
    detectors = [looking_down(), Detector(position=(3.0, 0.5, 0.5), direction=(-1.0, 0.0, 0.0), rows=4, cols=4, fov=0.5)]
    return Scene(
        **UNIT_BOX, species=species, light=ZENITH_SUN, detectors=detectors, unknown=UnknownSpec(species="cloud")
    )


@pytest.fixture
def tiny_tomography_scene() -> Scene:
    values = np.random.default_rng(1).uniform(1.0, 3.0, 8)
    return SyntheticSceneService.tomography_scene(n=2, values=values, rows=4, cols=4)


@pytest.fixture
def vacuum_scene() -> Scene:
    return Scene(**UNIT_BOX, light=ZENITH_SUN, detectors=[looking_down()])


@pytest.fixture
def slab_scene():
    """Homogeneous isotropic box seen from below by a slanted camera; returns (scene, direction cosine)"""
    species = ParticleSpecies(name="medium", extinction=1.5, albedo=0.8, phase=PhaseFunction(kind=PhaseKind.hg, g=0.0))
    direction = np.array([0.2, 0.1, 1.0]) / math.sqrt(1.05)
    camera = Detector(position=(0.5, 0.5, -1.0), direction=tuple(direction), up=(0.0, 1.0, 0.0), rows=2, cols=2, fov=0.1)
    scene = Scene(**UNIT_BOX, species=[species], light=ZENITH_SUN, detectors=[camera])
    return scene, direction


@pytest.fixture
def phong_scene() -> Scene:
    return SyntheticSceneService.reflectometry_scene(n_spheres=2, rows=6, cols=6)


def cloud_and_air(beta_cloud: float, beta_air: float, albedo_cloud: float = 0.99, albedo_air: float = 0.912) -> Scene:
    """One-voxel cloud grid plus constant Rayleigh air in the unit box"""
    geometry = GridGeometry(dims=(1, 1, 1))
    species = [
        ParticleSpecies(name="cloud", extinction=VoxelGridField.filled(geometry, beta_cloud), albedo=albedo_cloud),
        ParticleSpecies(name="air", extinction=beta_air, albedo=albedo_air, phase=PhaseFunction(kind=PhaseKind.rayleigh)),
    ]
    return Scene(**UNIT_BOX, species=species, light=ZENITH_SUN, detectors=[looking_down()])
