import logging
import math
from typing import List, Optional

import numpy as np
from scipy import ndimage

from pathrec.models.scene import (
    Detector,
    GridGeometry,
    LengthUnit,
    LightKind,
    LightSource,
    ParticleSpecies,
    PhaseFunction,
    PhaseKind,
    PhongBRDF,
    Scene,
    Surface,
    SurfaceKind,
    UnknownKind,
    UnknownSpec,
    VoxelGridField,
)

logger = logging.getLogger(__name__)

CLOUD_ALBEDO = 0.99
CLOUD_G = 0.85
AIR_EXTINCTION = 0.04
AIR_ALBEDO = 0.912


class SyntheticSceneService:
    """Desk-scale scenes for ground-truth synthesis, the self test and the test suite"""

    @staticmethod
    def cloud_field(n: int = 16, peak: float = 20.0, seed: int = 0, smoothing: float = 1.5) -> np.ndarray:
        """Smoothed random blob inside an ellipsoid, flat x-fastest, max value == peak"""
        rng = np.random.default_rng(seed)
        noise = ndimage.gaussian_filter(rng.random((n, n, n)), sigma=smoothing)
        z, y, x = np.meshgrid(*(np.linspace(-1.0, 1.0, n),) * 3, indexing="ij")
        envelope = np.clip(1.0 - (x / 0.7) ** 2 - (y / 0.7) ** 2 - ((z + 0.1) / 0.5) ** 2, 0.0, None)
        volume = envelope * (noise - noise.min())
        if volume.max() <= 0.0:
            return np.zeros(n ** 3)
        return (peak * volume / volume.max()).ravel()

    @staticmethod
    def ring_detectors(
        center=(0.5, 0.5, 0.5),
        distance: float = 3.0,
        n_ring: int = 8,
        elevation: float = math.radians(45.0),
        rows: int = 16,
        cols: int = 16,
        fov: float = math.radians(30.0),
    ) -> List[Detector]:
        """One zenith camera plus a ring of cameras at the given elevation, all aimed at center"""
        c = np.array(center, dtype=np.float64)
        detectors = [
            Detector(
                position=tuple(c + [0.0, 0.0, distance]), direction=(0.0, 0.0, -1.0), up=(0.0, 1.0, 0.0),
                rows=rows, cols=cols, fov=fov, name="zenith",
            )
        ]
        for k in range(n_ring):
            phi = 2.0 * math.pi * k / n_ring
            offset = distance * np.array(
                [math.cos(elevation) * math.cos(phi), math.cos(elevation) * math.sin(phi), math.sin(elevation)]
            )
            detectors.append(
                Detector(
                    position=tuple(c + offset), direction=tuple(-offset / distance),
                    rows=rows, cols=cols, fov=fov, name=f"ring{k}",
                )
            )
        return detectors

    @staticmethod
    def tomography_scene(
        n: int = 16,
        peak: float = 20.0,
        seed: int = 0,
        rows: int = 16,
        cols: int = 16,
        values: Optional[np.ndarray] = None,
        air: bool = True,
    ) -> Scene:
        """Cloud in a unit box (km) lit by the zenith sun and seen by 9 cameras"""
        geometry = GridGeometry(dims=(n, n, n), origin=(0.0, 0.0, 0.0), voxel_size=(1.0 / n,) * 3, unit=LengthUnit.km)
        if values is None:
            values = SyntheticSceneService.cloud_field(n, peak, seed)
        species = [
            ParticleSpecies(
                name="cloud",
                extinction=VoxelGridField.filled(geometry, 0.0).with_values(values),
                albedo=CLOUD_ALBEDO,
                phase=PhaseFunction(kind=PhaseKind.hg, g=CLOUD_G),
            )
        ]
        if air:
            species.append(
                ParticleSpecies(
                    name="air", extinction=AIR_EXTINCTION, albedo=AIR_ALBEDO, phase=PhaseFunction(kind=PhaseKind.rayleigh)
                )
            )
        scene = Scene(
            unit=LengthUnit.km,
            bounds_lo=(0.0, 0.0, 0.0),
            bounds_hi=(1.0, 1.0, 1.0),
            species=species,
            light=LightSource(kind=LightKind.sun, radiance=1.0, direction=(0.0, 0.0, -1.0)),
            detectors=SyntheticSceneService.ring_detectors(rows=rows, cols=cols),
            unknown=UnknownSpec(kind=UnknownKind.tomography, species="cloud"),
        )
        logger.info(f"📋 Tomography scene: {n}^3 voxels, peak extinction {peak}, {len(scene.detectors)} cameras")
        return scene

    @staticmethod
    def slab_scene(
        extinction: float = 2.0,
        albedo: float = 0.9,
        g: float = 0.5,
        thickness: float = 0.25,
        rows: int = 16,
        cols: int = 16,
    ) -> Scene:
        """Homogeneous slab under the zenith sun, one camera looking straight down on it"""
        species = ParticleSpecies(
            name="slab", extinction=extinction, albedo=albedo, phase=PhaseFunction(kind=PhaseKind.hg, g=g)
        )
        camera = Detector(
            position=(0.5, 0.5, 2.0), direction=(0.0, 0.0, -1.0), up=(0.0, 1.0, 0.0), rows=rows, cols=cols,
            fov=0.5, name="nadir",
        )
        return Scene(
            unit=LengthUnit.km,
            bounds_lo=(0.0, 0.0, 0.0),
            bounds_hi=(1.0, 1.0, thickness),
            species=[species],
            light=LightSource(kind=LightKind.sun, radiance=1.0, direction=(0.0, 0.0, -1.0)),
            detectors=[camera],
        )

    @staticmethod
    def reflectometry_scene(
        kappa_s: float = 0.7,
        gamma: float = 50.0,
        n_spheres: int = 14,
        rows: int = 60,
        cols: int = 60,
        seed: int = 0,
    ) -> Scene:
        """Open box with diffuse spheres around one Phong sphere (surface 0), point light inside"""
        rng = np.random.default_rng(seed)
        surfaces = [
            Surface(
                kind=SurfaceKind.sphere, center=(0.5, 0.5, 0.3), radius=0.18,
                brdf=PhongBRDF(kappa_s=kappa_s, gamma=gamma), name="target",
            ),
            Surface(kind=SurfaceKind.rect, axis=2, position=0.0, lo=(0.0, 0.0), hi=(1.0, 1.0), reflectance=0.8, name="floor"),
            Surface(kind=SurfaceKind.rect, axis=1, position=1.0, lo=(0.0, 0.0), hi=(1.0, 1.0), reflectance=0.8, name="back"),
            Surface(kind=SurfaceKind.rect, axis=0, position=0.0, lo=(0.0, 0.0), hi=(1.0, 1.0), reflectance=0.6, name="left"),
            Surface(kind=SurfaceKind.rect, axis=0, position=1.0, lo=(0.0, 0.0), hi=(1.0, 1.0), reflectance=0.6, name="right"),
        ]
        placed = 0
        while placed < n_spheres:
            center = rng.uniform([0.1, 0.1, 0.06], [0.9, 0.9, 0.12])
            if np.linalg.norm(center[:2] - np.array([0.5, 0.5])) < 0.28:
                continue
            surfaces.append(
                Surface(
                    kind=SurfaceKind.sphere, center=tuple(center), radius=0.05,
                    reflectance=float(rng.uniform(0.3, 0.9)), name=f"diffuse{placed}",
                )
            )
            placed += 1
        camera = Detector(
            position=(0.5, -0.9, 0.75), direction=(0.0, 1.4, -0.45), rows=rows, cols=cols,
            fov=math.radians(50.0), name="camera",
        )
        return Scene(
            bounds_lo=(-0.01, -0.01, -0.01),
            bounds_hi=(1.01, 1.01, 1.01),
            surfaces=surfaces,
            light=LightSource(kind=LightKind.point, radiance=1.0, position=(0.5, 0.2, 0.85)),
            detectors=[camera],
            unknown=UnknownSpec(kind=UnknownKind.phong, surface=0),
        )
