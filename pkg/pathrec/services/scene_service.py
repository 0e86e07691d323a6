import json
import logging
import math
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError
from scipy.special import roots_legendre

from pathrec.kernels.optics import (
    MODE_EXTINCTION,
    MODE_SCATTERING,
    PHASE_HG,
    PHASE_RAYLEIGH,
    sample_phase_cos_array,
)
from pathrec.models.errors import ConfigError, SceneDomainError
from pathrec.models.scene import (
    Detector,
    KernelScene,
    LengthUnit,
    LightKind,
    LightSource,
    ParticleSpecies,
    PhaseFunction,
    PhaseKind,
    PhongBRDF,
    Scene,
    SceneParams,
    SpeciesSampling,
    Surface,
    SurfaceKind,
    UnknownKind,
    UnknownSpec,
    VoxelGridField,
)
from pathrec.services.grid_io_service import GridIOService

logger = logging.getLogger(__name__)

MAX_LISTED_VOXELS = 10


class SpeciesFile(BaseModel):
    name: str
    extinction: Union[float, str]
    albedo: float
    phase: PhaseFunction = PhaseFunction()


class GridFile(BaseModel):
    dims: Tuple[int, int, int]
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    voxel_size: Tuple[float, float, float] = (1.0, 1.0, 1.0)


class SceneFile(BaseModel):
    """JSON schema of a scene file; grid paths are relative to the file"""
    unit: LengthUnit = LengthUnit.m
    bounds: Optional[dict] = None
    grid: Optional[GridFile] = None
    species: List[SpeciesFile] = []
    surfaces: List[Surface] = []
    light: LightSource
    detectors: List[Detector]
    species_sampling: SpeciesSampling = SpeciesSampling.extinction
    unknown: UnknownSpec = UnknownSpec()


class SceneService:
    """Scene loading, validation and pointwise optics"""

    # ------------------------------------------------------------------ loading

    @staticmethod
    def load_scene(path: Union[str, Path]) -> Scene:
        path = Path(path)
        logger.info(f"📂 Loading scene: {path}")
        if not path.is_file():
            error_msg = f"Scene file not found: {path}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        try:
            raw = json.loads(path.read_text())
            document = SceneFile.model_validate(raw)
        except (json.JSONDecodeError, ValidationError) as e:
            error_msg = f"Malformed scene file {path}: {str(e)}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)

        species = []
        for entry in document.species:
            if isinstance(entry.extinction, str):
                grid_path = (path.parent / entry.extinction).resolve()
                extinction = GridIOService.load_grid(grid_path)
                logger.debug(f"   Species {entry.name}: grid {grid_path.name} dims={extinction.dims}")
            else:
                extinction = float(entry.extinction)
                logger.debug(f"   Species {entry.name}: constant {extinction}")
            species.append(
                ParticleSpecies(name=entry.name, extinction=extinction, albedo=entry.albedo, phase=entry.phase)
            )

        if document.bounds is not None:
            lo, hi = tuple(document.bounds["lo"]), tuple(document.bounds["hi"])
        else:
            geometry = None
            for s in species:
                if not s.is_constant:
                    geometry = s.extinction.geometry
                    break
            if geometry is None and document.grid is not None:
                geometry = document.grid
            if geometry is None:
                error_msg = f"Scene {path} needs bounds or a gridded species"
                logger.error(f"❌ {error_msg}")
                raise ConfigError(error_msg)
            origin = np.array(geometry.origin, dtype=np.float64)
            extent = np.array(geometry.dims, dtype=np.float64) * np.array(geometry.voxel_size, dtype=np.float64)
            lo, hi = tuple(origin), tuple(origin + extent)

        scene = Scene(
            unit=document.unit,
            bounds_lo=lo,
            bounds_hi=hi,
            species=species,
            surfaces=document.surfaces,
            light=document.light,
            detectors=document.detectors,
            species_sampling=document.species_sampling,
            unknown=document.unknown,
        )
        violations = SceneService.validate_scene(scene)
        if violations:
            error_msg = f"Scene {path} is invalid: " + "; ".join(violations)
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        logger.info(
            f"✅ Scene loaded - species: {len(scene.species)}, surfaces: {len(scene.surfaces)}, "
            f"detectors: {len(scene.detectors)}, grid: {scene.grid.dims}"
        )
        return scene

    @staticmethod
    def save_scene(scene: Scene, path: Union[str, Path]) -> None:
        """Write the scene as JSON; gridded species are written next to it as VGRD files"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        species = []
        for s in scene.species:
            if s.is_constant:
                extinction = s.extinction
            else:
                grid_name = f"{path.stem}_{s.name}.vgrd"
                GridIOService.save_grid(path.parent / grid_name, s.extinction)
                extinction = grid_name
            species.append({"name": s.name, "extinction": extinction, "albedo": s.albedo, "phase": s.phase.model_dump(mode="json")})
        payload = {
            "unit": scene.unit.value,
            "bounds": {"lo": list(scene.bounds_lo), "hi": list(scene.bounds_hi)},
            "species": species,
            "surfaces": [s.model_dump(mode="json") for s in scene.surfaces],
            "light": scene.light.model_dump(mode="json"),
            "detectors": [d.model_dump(mode="json") for d in scene.detectors],
            "species_sampling": scene.species_sampling.value,
            "unknown": scene.unknown.model_dump(mode="json"),
        }
        path.write_text(json.dumps(payload, indent=2))
        logger.info(f"💾 Scene written: {path}")

    # --------------------------------------------------------------- parameters

    @staticmethod
    def scene_params(scene: Scene) -> SceneParams:
        """Parameter vector M of a scene: species extinction expanded on the shared grid"""
        n_voxels = scene.grid.n_voxels
        beta = np.zeros((len(scene.species), n_voxels), dtype=np.float64)
        for j, s in enumerate(scene.species):
            if s.is_constant:
                beta[j] = float(s.extinction)
            else:
                beta[j] = s.extinction.values
        kappa = np.array([s.brdf.kappa_s for s in scene.surfaces], dtype=np.float64)
        gamma = np.array([s.brdf.gamma for s in scene.surfaces], dtype=np.float64)
        return SceneParams(beta=beta, kappa=kappa, gamma=gamma)

    @staticmethod
    def with_params(scene: Scene, params: SceneParams) -> Scene:
        """Scene carrying the given parameters (gridded species keep their grid, constants become grids if changed)"""
        grid = scene.grid
        species = []
        for j, s in enumerate(scene.species):
            values = params.beta[j]
            if s.is_constant and np.all(values == values[0]):
                species.append(s.model_copy(update={"extinction": float(values[0])}))
            else:
                species.append(s.model_copy(update={"extinction": VoxelGridField.filled(grid, 0.0).with_values(values)}))
        surfaces = [
            s.model_copy(update={"brdf": PhongBRDF(kappa_s=float(params.kappa[k]), gamma=float(params.gamma[k]))})
            for k, s in enumerate(scene.surfaces)
        ]
        return scene.model_copy(update={"species": species, "surfaces": surfaces})

    @staticmethod
    def light_prefactor(scene: Scene) -> Tuple[float, np.ndarray]:
        """(estimator prefactor, cumulative pick probabilities of the sun-facing faces per axis)

        Sun radiance is the irradiance on a plane normal to the sun direction. Each
        face whose outward normal points at the sun is picked with probability
        proportional to its area projected along the sun direction.
        """
        light = scene.light
        if light.kind == LightKind.point:
            return 4.0 * math.pi * light.radiance, np.zeros(3, dtype=np.float64)
        direction = np.array(light.direction, dtype=np.float64)
        direction = direction / np.linalg.norm(direction)
        extent = np.array(scene.bounds_hi, dtype=np.float64) - np.array(scene.bounds_lo, dtype=np.float64)
        projected = np.array(
            [abs(direction[a]) * extent[(a + 1) % 3] * extent[(a + 2) % 3] for a in range(3)], dtype=np.float64
        )
        total = float(projected.sum())
        face_cdf = np.cumsum(projected) / total
        face_cdf[-1] = 1.0
        return total * light.radiance, face_cdf

    @staticmethod
    def pack(scene: Scene) -> KernelScene:
        """Flatten the parameter-independent part of a scene for the kernels"""
        grid = scene.grid
        lo = np.array(scene.bounds_lo, dtype=np.float64)
        hi = np.array(scene.bounds_hi, dtype=np.float64)
        prefactor, face_cdf = SceneService.light_prefactor(scene)

        surf_geom = np.zeros((len(scene.surfaces), 7), dtype=np.float64)
        surf_kinds = np.zeros(len(scene.surfaces), dtype=np.int64)
        for k, s in enumerate(scene.surfaces):
            if s.kind == SurfaceKind.sphere:
                surf_kinds[k] = 0
                surf_geom[k, :4] = [*s.center, s.radius]
            else:
                surf_kinds[k] = 1
                surf_geom[k, :6] = [s.axis, s.position, s.lo[0], s.lo[1], s.hi[0], s.hi[1]]

        det_pos = np.array([d.position for d in scene.detectors], dtype=np.float64).reshape(-1, 3)
        det_basis = np.array([d.basis() for d in scene.detectors], dtype=np.float64).reshape(-1, 3, 3)
        tan_h = np.array([math.tan(0.5 * d.fov) for d in scene.detectors], dtype=np.float64)
        tan_v = np.array([math.tan(0.5 * d.fov) * d.rows / d.cols for d in scene.detectors], dtype=np.float64)

        light_dir = np.array(scene.light.direction, dtype=np.float64)
        light_dir = light_dir / np.linalg.norm(light_dir)
        kinds = np.array(
            [PHASE_RAYLEIGH if s.phase.kind == PhaseKind.rayleigh else PHASE_HG for s in scene.species],
            dtype=np.int64,
        )
        return KernelScene(
            lo=lo,
            hi=hi,
            size=np.array(grid.voxel_size, dtype=np.float64),
            dims=np.array(grid.dims, dtype=np.int64),
            albedo=np.array([s.albedo for s in scene.species], dtype=np.float64),
            kinds=kinds,
            gs=np.array([s.phase.g for s in scene.species], dtype=np.float64),
            mode=MODE_SCATTERING if scene.species_sampling == SpeciesSampling.scattering else MODE_EXTINCTION,
            surf_kinds=surf_kinds,
            surf_geom=surf_geom,
            surf_rho=np.array([s.reflectance for s in scene.surfaces], dtype=np.float64),
            eps=1e-9 * float(np.linalg.norm(hi - lo)),
            light_kind=0 if scene.light.kind == LightKind.sun else 1,
            light_pos=np.array(scene.light.position, dtype=np.float64),
            light_dir=light_dir,
            face_cdf=face_cdf,
            prefactor=prefactor,
            det_pos=det_pos,
            det_basis=det_basis,
            det_tan_h=tan_h,
            det_tan_v=tan_v,
            det_rows=np.array([d.rows for d in scene.detectors], dtype=np.int64),
            det_cols=np.array([d.cols for d in scene.detectors], dtype=np.int64),
            pixel_offsets=scene.pixel_offsets,
        )

    # ----------------------------------------------------------- point queries

    @staticmethod
    def voxel_at(scene: Scene, x) -> int:
        x = np.asarray(x, dtype=np.float64)
        lo = np.array(scene.bounds_lo, dtype=np.float64)
        hi = np.array(scene.bounds_hi, dtype=np.float64)
        if np.any(x < lo) or np.any(x > hi):
            error_msg = f"Point {x.tolist()} lies outside scene bounds {lo.tolist()}..{hi.tolist()}"
            logger.error(f"❌ {error_msg}")
            raise SceneDomainError(error_msg)
        grid = scene.grid
        idx = np.floor((x - grid.lo) / np.array(grid.voxel_size)).astype(np.int64)
        idx = np.clip(idx, 0, np.array(grid.dims) - 1)
        return grid.flat_index(*idx)

    @staticmethod
    def extinction_at(scene: Scene, x, params: Optional[SceneParams] = None) -> Tuple[float, np.ndarray]:
        """(beta_total, per-species beta) at point x"""
        params = params or SceneService.scene_params(scene)
        v = SceneService.voxel_at(scene, x)
        per_species = np.array(params.beta[:, v])
        return float(per_species.sum()), per_species

    @staticmethod
    def effective_albedo(scene: Scene, x, params: Optional[SceneParams] = None) -> float:
        total, per_species = SceneService.extinction_at(scene, x, params)
        if total <= 0.0:
            return 0.0
        albedo = np.array([s.albedo for s in scene.species], dtype=np.float64)
        return float(np.dot(albedo, per_species) / total)

    @staticmethod
    def phase_eval(phase: PhaseFunction, cos_theta):
        """Phase density per steradian; accepts scalars or arrays"""
        mu = np.asarray(cos_theta, dtype=np.float64)
        if phase.kind == PhaseKind.rayleigh:
            value = 3.0 * (1.0 + mu * mu) / (16.0 * math.pi)
        else:
            g = phase.g
            denom = 1.0 + g * g - 2.0 * g * mu
            value = (1.0 - g * g) / (4.0 * math.pi * denom ** 1.5)
        return float(value) if value.ndim == 0 else value

    @staticmethod
    def mixture_phase_eval(scene: Scene, x, cos_theta, params: Optional[SceneParams] = None):
        """Scattering-coefficient weighted mixture of the species phase functions"""
        _, per_species = SceneService.extinction_at(scene, x, params)
        albedo = np.array([s.albedo for s in scene.species], dtype=np.float64)
        weights = albedo * per_species
        total = weights.sum()
        if total <= 0.0:
            error_msg = f"Zero scattering coefficient at {np.asarray(x).tolist()}"
            logger.error(f"❌ {error_msg}")
            raise SceneDomainError(error_msg)
        value = sum(
            w * np.asarray(SceneService.phase_eval(s.phase, cos_theta)) for w, s in zip(weights, scene.species)
        ) / total
        return float(value) if np.ndim(value) == 0 else value

    @staticmethod
    def phase_sample(phase: PhaseFunction, rng: np.random.Generator, size: Optional[int] = None):
        """(cos_theta, azimuth) drawn from the phase function"""
        n = 1 if size is None else int(size)
        u = rng.random(n)
        kind = PHASE_RAYLEIGH if phase.kind == PhaseKind.rayleigh else PHASE_HG
        mu = sample_phase_cos_array(kind, float(phase.g), u)
        phi = 2.0 * math.pi * rng.random(n)
        if size is None:
            return float(mu[0]), float(phi[0])
        return mu, phi

    @staticmethod
    def brdf_eval_phong(brdf: PhongBRDF, omega, omega_prime) -> float:
        c = float(np.dot(np.asarray(omega, dtype=np.float64), np.asarray(omega_prime, dtype=np.float64)))
        c = min(max(c, 0.0), 1.0)
        return 1.0 - brdf.kappa_s + brdf.kappa_s * c ** brdf.gamma

    # ---------------------------------------------------------------- checks

    @staticmethod
    def phase_normalization(phase: PhaseFunction, order: int = 256) -> float:
        """Sphere integral of the phase function by Gauss-Legendre quadrature in cos(theta)"""
        nodes, weights = roots_legendre(order)
        return float(2.0 * math.pi * np.dot(weights, SceneService.phase_eval(phase, nodes)))

    @staticmethod
    def brdf_energy(
        brdf: PhongBRDF, incident, reflectance: float = 1.0, normalized: bool = True, order: int = 128
    ) -> float:
        """Hemispherical integral of f_r (n . w) for an incident direction, normal +z.

        normalized=True integrates the rendered BRDF (rho/pi) b; False integrates b itself.
        """
        incident = np.asarray(incident, dtype=np.float64)
        incident = incident / np.linalg.norm(incident)
        mirror = incident * np.array([1.0, 1.0, -1.0])
        mu, mu_w = roots_legendre(order)
        mu = 0.5 * (mu + 1.0)
        mu_w = 0.5 * mu_w
        phi = (np.arange(2 * order) + 0.5) * (math.pi / order)
        phi_w = math.pi / order
        sin_t = np.sqrt(1.0 - mu * mu)
        wx = sin_t[:, None] * np.cos(phi)[None, :]
        wy = sin_t[:, None] * np.sin(phi)[None, :]
        wz = np.broadcast_to(mu[:, None], wx.shape)
        c = np.clip(wx * mirror[0] + wy * mirror[1] + wz * mirror[2], 0.0, 1.0)
        b = 1.0 - brdf.kappa_s + brdf.kappa_s * c ** brdf.gamma
        if normalized:
            b = b * reflectance / math.pi
        return float(np.sum(b * wz * mu_w[:, None]) * phi_w)

    @staticmethod
    def validate_scene(scene: Scene) -> List[str]:
        """Every violated invariant with its location; empty iff the scene is well-formed"""
        violations: List[str] = []
        lo = np.array(scene.bounds_lo, dtype=np.float64)
        hi = np.array(scene.bounds_hi, dtype=np.float64)
        if np.any(hi <= lo):
            violations.append(f"bounds: hi {hi.tolist()} must exceed lo {lo.tolist()}")

        reference = None
        for j, s in enumerate(scene.species):
            where = f"species[{j}] '{s.name}'"
            if not 0.0 <= s.albedo <= 1.0:
                violations.append(f"{where}: albedo {s.albedo} outside [0, 1]")
            if s.phase.kind == PhaseKind.hg and not -1.0 < s.phase.g < 1.0:
                violations.append(f"{where}: HG asymmetry g={s.phase.g} outside (-1, 1)")
            if s.is_constant:
                if float(s.extinction) < 0.0 or not math.isfinite(float(s.extinction)):
                    violations.append(f"{where}: constant extinction {s.extinction} must be finite and >= 0")
                continue
            field = s.extinction
            geometry = field.geometry
            if min(field.dims) < 1:
                violations.append(f"{where}: dims {field.dims} must all be >= 1")
                continue
            if min(field.voxel_size) <= 0.0:
                violations.append(f"{where}: voxel_size {field.voxel_size} must be > 0")
            if field.values.shape[0] != geometry.n_voxels:
                violations.append(
                    f"{where}: {field.values.shape[0]} values for {geometry.n_voxels} voxels"
                )
                continue
            bad = np.flatnonzero(~(field.values >= 0.0) | ~np.isfinite(field.values))
            for v in bad[:MAX_LISTED_VOXELS]:
                violations.append(
                    f"{where}: extinction {field.values[v]} at voxel {geometry.unravel(int(v))} must be finite and >= 0"
                )
            if bad.shape[0] > MAX_LISTED_VOXELS:
                violations.append(f"{where}: {bad.shape[0] - MAX_LISTED_VOXELS} more invalid voxels")
            if reference is None:
                reference = geometry
                if not (np.allclose(geometry.lo, lo) and np.allclose(geometry.hi, hi)):
                    violations.append(
                        f"{where}: grid extent {geometry.lo.tolist()}..{geometry.hi.tolist()} differs from bounds"
                    )
            elif not reference.same_layout(geometry):
                violations.append(f"{where}: grid dims/origin/voxel_size differ from the first gridded species")

        for k, s in enumerate(scene.surfaces):
            where = f"surfaces[{k}]"
            if not 0.0 <= s.brdf.kappa_s <= 1.0:
                violations.append(f"{where}: kappa_s {s.brdf.kappa_s} outside [0, 1]")
            if s.brdf.gamma < 0.0:
                violations.append(f"{where}: gamma {s.brdf.gamma} must be >= 0")
            if not 0.0 <= s.reflectance <= 1.0:
                violations.append(f"{where}: reflectance {s.reflectance} outside [0, 1]")
            if s.kind == SurfaceKind.sphere and s.radius <= 0.0:
                violations.append(f"{where}: sphere radius {s.radius} must be > 0")
            if s.kind == SurfaceKind.rect:
                if s.axis not in (0, 1, 2):
                    violations.append(f"{where}: rect axis {s.axis} must be 0, 1 or 2")
                if s.hi[0] <= s.lo[0] or s.hi[1] <= s.lo[1]:
                    violations.append(f"{where}: rect extent lo {s.lo} hi {s.hi} is empty")

        light = scene.light
        if not light.radiance > 0.0:
            violations.append(f"light: radiance {light.radiance} must be > 0")
        if light.kind == LightKind.sun:
            norm = float(np.linalg.norm(light.direction))
            if abs(norm - 1.0) > 1e-9:
                violations.append(f"light: sun direction norm {norm} must be 1")

        if not scene.detectors:
            violations.append("detectors: at least one detector is required")
        for k, d in enumerate(scene.detectors):
            where = f"detectors[{k}]"
            if not 0.0 < d.fov < math.pi:
                violations.append(f"{where}: fov {d.fov} outside (0, pi)")
            if d.rows < 1 or d.cols < 1:
                violations.append(f"{where}: pixel grid {d.rows}x{d.cols} must be at least 1x1")
            forward = np.array(d.direction, dtype=np.float64)
            if np.linalg.norm(forward) == 0.0:
                violations.append(f"{where}: view direction is zero")
            elif np.linalg.norm(np.cross(forward, np.array(d.up, dtype=np.float64))) < 1e-12:
                violations.append(f"{where}: up vector is parallel to the view direction")

        unknown = scene.unknown
        if unknown.kind == UnknownKind.tomography and scene.species:
            names = [s.name for s in scene.species]
            if unknown.species is not None and unknown.species not in names:
                violations.append(f"unknown: species '{unknown.species}' not in {names}")
        if unknown.kind == UnknownKind.phong:
            if unknown.surface is None or not 0 <= unknown.surface < len(scene.surfaces):
                violations.append(f"unknown: surface index {unknown.surface} out of range")

        for violation in violations:
            logger.warning(f"⚠️  {violation}")
        return violations


