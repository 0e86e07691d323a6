import hashlib
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

Vec3 = Tuple[float, float, float]


def _frozen_array(value, dtype=np.float64) -> np.ndarray:
    array = np.array(value, dtype=dtype)
    array.flags.writeable = False
    return array


class LengthUnit(str, Enum):
    m = "m"
    km = "km"


class PhaseKind(str, Enum):
    hg = "hg"
    rayleigh = "rayleigh"


class LightKind(str, Enum):
    sun = "sun"
    point = "point"


class SurfaceKind(str, Enum):
    sphere = "sphere"
    rect = "rect"


class SpeciesSampling(str, Enum):
    extinction = "extinction"
    scattering = "scattering"


class UnknownKind(str, Enum):
    tomography = "tomography"
    phong = "phong"


class GridGeometry(BaseModel):
    """Voxel layout shared by every gridded species (x-fastest ordering)"""
    model_config = ConfigDict(frozen=True)

    dims: Tuple[int, int, int]
    origin: Vec3 = (0.0, 0.0, 0.0)
    voxel_size: Vec3 = (1.0, 1.0, 1.0)
    unit: LengthUnit = LengthUnit.m

    @property
    def n_voxels(self) -> int:
        return int(self.dims[0] * self.dims[1] * self.dims[2])

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.origin, dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return self.lo + np.array(self.dims, dtype=np.float64) * np.array(self.voxel_size, dtype=np.float64)

    def flat_index(self, ix: int, iy: int, iz: int) -> int:
        nx, ny, _ = self.dims
        return int(ix + nx * (iy + ny * iz))

    def unravel(self, v: int) -> Tuple[int, int, int]:
        nx, ny, _ = self.dims
        return int(v % nx), int((v // nx) % ny), int(v // (nx * ny))

    def voxel_centers(self) -> np.ndarray:
        nx, ny, nz = self.dims
        iz, iy, ix = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        idx = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1).astype(np.float64)
        return self.lo + (idx + 0.5) * np.array(self.voxel_size, dtype=np.float64)

    def same_layout(self, other: "GridGeometry") -> bool:
        return (
            tuple(self.dims) == tuple(other.dims)
            and np.allclose(self.origin, other.origin, rtol=0.0, atol=1e-12)
            and np.allclose(self.voxel_size, other.voxel_size, rtol=0.0, atol=1e-12)
        )


class VoxelGridField(BaseModel):
    """Per-voxel scalar field, one value per voxel in x-fastest order"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    dims: Tuple[int, int, int]
    origin: Vec3 = (0.0, 0.0, 0.0)
    voxel_size: Vec3 = (1.0, 1.0, 1.0)
    unit: LengthUnit = LengthUnit.m
    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def _as_array(cls, value):
        return _frozen_array(value).ravel()

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(dims=self.dims, origin=self.origin, voxel_size=self.voxel_size, unit=self.unit)

    @classmethod
    def filled(cls, geometry: GridGeometry, value: float) -> "VoxelGridField":
        return cls(
            dims=geometry.dims,
            origin=geometry.origin,
            voxel_size=geometry.voxel_size,
            unit=geometry.unit,
            values=np.full(geometry.n_voxels, float(value)),
        )

    def with_values(self, values: np.ndarray) -> "VoxelGridField":
        return VoxelGridField(
            dims=self.dims, origin=self.origin, voxel_size=self.voxel_size, unit=self.unit, values=values
        )

    def as_volume(self) -> np.ndarray:
        """Values reshaped to (nz, ny, nx)"""
        nx, ny, nz = self.dims
        return np.asarray(self.values).reshape(nz, ny, nx)


class PhaseFunction(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: PhaseKind = PhaseKind.hg
    g: float = 0.0


class PhongBRDF(BaseModel):
    model_config = ConfigDict(frozen=True)

    kappa_s: float = 0.0
    gamma: float = 1.0


class ParticleSpecies(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str
    extinction: Union[VoxelGridField, float]
    albedo: float
    phase: PhaseFunction = PhaseFunction()

    @property
    def is_constant(self) -> bool:
        return not isinstance(self.extinction, VoxelGridField)


class Surface(BaseModel):
    """Sphere (center, radius) or axis-aligned rectangle (axis, position, lo, hi)"""
    model_config = ConfigDict(frozen=True)

    kind: SurfaceKind
    center: Vec3 = (0.0, 0.0, 0.0)
    radius: float = 0.0
    axis: int = 2
    position: float = 0.0
    lo: Tuple[float, float] = (0.0, 0.0)
    hi: Tuple[float, float] = (0.0, 0.0)
    reflectance: float = 1.0
    brdf: PhongBRDF = PhongBRDF()
    name: Optional[str] = None


class LightSource(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: LightKind
    radiance: float = 1.0
    direction: Vec3 = (0.0, 0.0, -1.0)
    position: Vec3 = (0.0, 0.0, 0.0)


class Detector(BaseModel):
    """Pinhole camera; fov is the full horizontal field of view in radians"""
    model_config = ConfigDict(frozen=True)

    position: Vec3
    direction: Vec3
    up: Vec3 = (0.0, 0.0, 1.0)
    rows: int = 16
    cols: int = 16
    fov: float = 0.5
    name: Optional[str] = None

    @property
    def n_pixels(self) -> int:
        return int(self.rows * self.cols)

    def basis(self) -> np.ndarray:
        """Rows: forward, right, up"""
        forward = np.array(self.direction, dtype=np.float64)
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, np.array(self.up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        up = np.cross(right, forward)
        return np.stack([forward, right, up])

    def at_resolution(self, rows: int, cols: int) -> "Detector":
        return self.model_copy(update={"rows": int(rows), "cols": int(cols)})


class UnknownSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: UnknownKind = UnknownKind.tomography
    species: Optional[str] = None
    surface: Optional[int] = None


class Scene(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    unit: LengthUnit = LengthUnit.m
    bounds_lo: Vec3
    bounds_hi: Vec3
    species: List[ParticleSpecies] = Field(default_factory=list)
    surfaces: List[Surface] = Field(default_factory=list)
    light: LightSource
    detectors: List[Detector] = Field(default_factory=list)
    species_sampling: SpeciesSampling = SpeciesSampling.extinction
    unknown: UnknownSpec = UnknownSpec()

    @property
    def grid(self) -> GridGeometry:
        """Shared grid of the gridded species, or one voxel spanning the bounds"""
        for species in self.species:
            if not species.is_constant:
                return species.extinction.geometry
        lo = np.array(self.bounds_lo, dtype=np.float64)
        hi = np.array(self.bounds_hi, dtype=np.float64)
        return GridGeometry(dims=(1, 1, 1), origin=tuple(lo), voxel_size=tuple(hi - lo), unit=self.unit)

    @property
    def pixel_offsets(self) -> np.ndarray:
        counts = [d.n_pixels for d in self.detectors]
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def species_index(self, name: Optional[str]) -> int:
        if name is None:
            return 0
        for j, species in enumerate(self.species):
            if species.name == name:
                return j
        raise KeyError(name)

    def at_resolution(self, rows: int, cols: int) -> "Scene":
        return self.model_copy(update={"detectors": [d.at_resolution(rows, cols) for d in self.detectors]})


class SceneParams(BaseModel):
    """The parameter vector M: per-species extinction on the shared grid plus surface Phong parameters"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    beta: np.ndarray
    kappa: np.ndarray
    gamma: np.ndarray

    @field_validator("beta", mode="before")
    @classmethod
    def _beta_2d(cls, value):
        array = np.array(value, dtype=np.float64)
        if array.ndim == 1:
            array = array.reshape(1, -1)
        array.flags.writeable = False
        return array

    @field_validator("kappa", "gamma", mode="before")
    @classmethod
    def _vector(cls, value):
        return _frozen_array(value).ravel()

    @property
    def params_id(self) -> str:
        digest = hashlib.sha1()
        for array in (self.beta, self.kappa, self.gamma):
            digest.update(np.ascontiguousarray(array, dtype=np.float64).tobytes())
            digest.update(str(array.shape).encode())
        return digest.hexdigest()[:16]

    @property
    def beta_total(self) -> np.ndarray:
        return self.beta.sum(axis=0)

    def with_species_values(self, j: int, values: np.ndarray) -> "SceneParams":
        beta = np.array(self.beta)
        beta[j] = values
        return SceneParams(beta=beta, kappa=self.kappa, gamma=self.gamma)

    def with_phong(self, surface: int, kappa_s: float, gamma: float) -> "SceneParams":
        kappa = np.array(self.kappa)
        gam = np.array(self.gamma)
        kappa[surface] = kappa_s
        gam[surface] = gamma
        return SceneParams(beta=self.beta, kappa=kappa, gamma=gam)

    def scaled(self, factor: float) -> "SceneParams":
        return SceneParams(beta=self.beta * factor, kappa=self.kappa, gamma=self.gamma)


class KernelScene(BaseModel):
    """Flat arrays handed to the numba kernels; built by SceneService.pack"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    lo: np.ndarray
    hi: np.ndarray
    size: np.ndarray
    dims: np.ndarray
    albedo: np.ndarray
    kinds: np.ndarray
    gs: np.ndarray
    mode: int
    surf_kinds: np.ndarray
    surf_geom: np.ndarray
    surf_rho: np.ndarray
    eps: float
    light_kind: int
    light_pos: np.ndarray
    light_dir: np.ndarray
    face_cdf: np.ndarray
    prefactor: float
    det_pos: np.ndarray
    det_basis: np.ndarray
    det_tan_h: np.ndarray
    det_tan_v: np.ndarray
    det_rows: np.ndarray
    det_cols: np.ndarray
    pixel_offsets: np.ndarray
