import logging
import math
import time
from typing import Optional, Tuple

import numpy as np

from pathrec.kernels.geometry import (
    clip_box,
    hit_surfaces,
    pixel_of,
    project,
    rotate,
    segment_walk,
    walk,
)
from pathrec.kernels.tracer import trace_chunk
from pathrec.models.errors import ConfigError, SceneDomainError
from pathrec.models.path import (
    DistanceEvent,
    DistanceSample,
    EstimatorOutput,
    PathRecord,
    PathStore,
    Ray,
    SegmentIntersections,
    VertexKind,
)
from pathrec.models.scene import GridGeometry, KernelScene, Scene, SceneParams, SpeciesSampling, SurfaceKind
from pathrec.services.pathstore_service import ParamArrays, PathStoreService, path_chunks
from pathrec.services.scene_service import SceneService

logger = logging.getLogger(__name__)

DEFAULT_MAX_BOUNCES = 500


class TransportService:
    """Forward path sampling, transmittance, path densities and local-estimation rendering"""

    def __init__(self, workers: int = 1):
        self.workers = max(1, int(workers))
        self.store_service = PathStoreService(workers=self.workers)

    # ------------------------------------------------------------ ray queries

    @staticmethod
    def traverse(grid: GridGeometry, ray: Ray, max_distance: float) -> SegmentIntersections:
        """Voxels crossed by the ray up to max_distance or the grid exit, in order"""
        o, d = ray.origin, ray.direction
        voxels, lengths = segment_walk(
            o[0], o[1], o[2], d[0], d[1], d[2], float(max_distance),
            grid.lo, grid.hi, np.array(grid.voxel_size, dtype=np.float64), np.array(grid.dims, dtype=np.int64),
        )
        return SegmentIntersections(voxels=voxels, lengths=lengths)

    @staticmethod
    def segment(scene: Scene, x, y) -> SegmentIntersections:
        """Intersections of the segment x -> y with the scene grid"""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        length = float(np.linalg.norm(y - x))
        if length == 0.0:
            return SegmentIntersections(voxels=[], lengths=[])
        return TransportService.traverse(scene.grid, Ray(origin=x, direction=y - x), length)

    @staticmethod
    def optical_depth(scene: Scene, params: SceneParams, x, y) -> float:
        segment = TransportService.segment(scene, x, y)
        total = params.beta_total
        return float(np.dot(total[segment.voxels], segment.lengths))

    @staticmethod
    def transmittance(scene: Scene, params: SceneParams, x, y) -> float:
        """exp(-optical depth) of the part of x -> y inside the bounds"""
        return math.exp(-TransportService.optical_depth(scene, params, x, y))

    @staticmethod
    def sample_distance(
        scene: Scene,
        params: SceneParams,
        ray: Ray,
        rng: Optional[np.random.Generator] = None,
        tau: Optional[float] = None,
    ) -> DistanceSample:
        """Free flight with tau ~ Exp(1) (or the given tau) against extinction and surfaces"""
        if tau is None:
            if rng is None:
                raise ConfigError("sample_distance needs an rng or an explicit tau")
            tau = float(rng.exponential(1.0))
        packed = SceneService.pack(scene)
        o, d = ray.origin, ray.direction
        t0, t1 = clip_box(o[0], o[1], o[2], d[0], d[1], d[2], packed.lo, packed.hi)
        t_start = max(t0, 0.0)
        if t1 <= t_start:
            return DistanceSample(event=DistanceEvent.escaped, distance=math.inf, tau=tau)
        t_surf, surface = hit_surfaces(o[0], o[1], o[2], d[0], d[1], d[2], packed.eps, t1, packed.surf_kinds, packed.surf_geom)
        t_stop = t_surf if surface >= 0 else t1
        room = int(packed.dims.sum()) + 3
        out_vox = np.empty(room, dtype=np.int64)
        out_len = np.empty(room, dtype=np.float64)
        total = np.ascontiguousarray(params.beta_total, dtype=np.float64)
        _, t_hit, v_hit = walk(
            o[0], o[1], o[2], d[0], d[1], d[2], t_start, t_stop,
            packed.lo, packed.size, packed.dims, total, tau, out_vox, out_len, 0,
        )
        if t_hit >= 0.0:
            return DistanceSample(
                event=DistanceEvent.scatter, distance=t_hit, point=ray.at(t_hit), voxel=int(v_hit), tau=tau
            )
        if surface >= 0:
            return DistanceSample(
                event=DistanceEvent.surface, distance=t_surf, point=ray.at(t_surf), surface=int(surface), tau=tau
            )
        return DistanceSample(event=DistanceEvent.escaped, distance=t1, point=ray.at(t1), tau=tau)

    @staticmethod
    def species_probabilities(scene: Scene, params: SceneParams, v: int) -> np.ndarray:
        """Species selection probabilities at voxel v under the scene's sampling mode"""
        beta = params.beta[:, v]
        albedo = np.array([s.albedo for s in scene.species], dtype=np.float64)
        weights = np.array(beta, dtype=np.float64)
        if scene.species_sampling == SpeciesSampling.scattering and float(np.dot(albedo, beta)) > 0.0:
            weights = albedo * beta
        total = weights.sum()
        if total <= 0.0:
            error_msg = f"Cannot scatter in vacuum voxel {v}"
            logger.error(f"❌ {error_msg}")
            raise SceneDomainError(error_msg)
        return weights / total

    @staticmethod
    def sample_direction(
        scene: Scene, params: SceneParams, x, omega_prev, rng: np.random.Generator
    ) -> Tuple[np.ndarray, int]:
        """(new direction, species index) of a volume scattering event at x"""
        v = SceneService.voxel_at(scene, x)
        probs = TransportService.species_probabilities(scene, params, v)
        j = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
        j = min(j, len(probs) - 1)
        mu, phi = SceneService.phase_sample(scene.species[j].phase, rng)
        d = np.asarray(omega_prev, dtype=np.float64)
        d = d / np.linalg.norm(d)
        return np.array(rotate(d[0], d[1], d[2], mu, phi)), j

    # ---------------------------------------------------------------- tracing

    def trace_store(
        self,
        scene: Scene,
        params: SceneParams,
        n_paths: int,
        seed: int,
        max_bounces: int = DEFAULT_MAX_BOUNCES,
        generation: int = 0,
    ) -> PathStore:
        """Sample n_paths forward paths under params; result is independent of the worker count"""
        if n_paths < 1:
            error_msg = f"n_paths must be at least 1, got {n_paths}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        packed = SceneService.pack(scene)
        arrays = ParamArrays(params)
        logger.info(f"🔄 Tracing {n_paths} paths - seed: {seed}, workers: {self.workers}, max bounces: {max_bounces}")
        start = time.time()

        def run(chunk: Tuple[int, int]):
            a, b = chunk
            return self._trace(packed, arrays, seed, a, b - a, max_bounces)

        chunks = self.store_service.map_chunks(run, path_chunks(n_paths))
        store = PathStoreService.assemble(
            chunks, seed=seed, max_bounces=max_bounces, prefactor=packed.prefactor,
            generation=generation, ref_params_id=params.params_id,
        )
        logger.info(f"✅ Traced {n_paths} paths in {time.time() - start:.3f}s")
        return store

    @staticmethod
    def _trace(packed: KernelScene, arrays: ParamArrays, seed: int, first: int, count: int, max_bounces: int):
        return trace_chunk(
            int(seed), int(first), int(count), int(max_bounces),
            packed.lo, packed.hi, packed.size, packed.dims,
            arrays.beta, arrays.total, packed.albedo, packed.kinds, packed.gs, packed.mode,
            packed.surf_kinds, packed.surf_geom, packed.eps,
            packed.light_kind, packed.light_pos, packed.light_dir, packed.face_cdf,
            packed.det_pos, packed.det_basis, packed.det_tan_h, packed.det_tan_v,
        )

    @staticmethod
    def trace_path(
        scene: Scene, params: SceneParams, seed: int, path_index: int, max_bounces: int = DEFAULT_MAX_BOUNCES
    ) -> PathRecord:
        """The path with the given index of the stream seeded by seed"""
        packed = SceneService.pack(scene)
        chunk = TransportService._trace(packed, ParamArrays(params), seed, path_index, 1, max_bounces)
        store = PathStoreService.assemble(
            [chunk], seed=seed, max_bounces=max_bounces, prefactor=packed.prefactor,
            generation=0, ref_params_id=params.params_id,
        )
        return store.record(0).model_copy(update={"path_index": int(path_index)})

    def render(
        self,
        scene: Scene,
        params: Optional[SceneParams],
        n_paths: int,
        seed: int,
        max_bounces: int = DEFAULT_MAX_BOUNCES,
    ) -> Tuple[EstimatorOutput, PathStore]:
        """Local-estimation images of every detector plus the store the paths were sampled into"""
        params = params or SceneService.scene_params(scene)
        store = self.trace_store(scene, params, n_paths, seed, max_bounces)
        output = self.store_service.recycled_render(store, scene, params, params)
        return output, store

    # ---------------------------------------------------------- local estimate

    @staticmethod
    def local_estimate(
        scene: Scene, params: SceneParams, x, omega_prev, detector: int, pixel: Optional[int] = None
    ) -> float:
        """Mixture phase x transmittance x 1/r^2 for the connection x -> detector, box pixel response"""
        x = np.asarray(x, dtype=np.float64)
        packed = SceneService.pack(scene)
        k = int(detector)
        inside, u, v = project(packed.det_pos[k], packed.det_basis[k], packed.det_tan_h[k], packed.det_tan_v[k], x[0], x[1], x[2])
        if not inside:
            return 0.0
        if pixel is not None:
            hit = pixel_of(u, v, packed.det_tan_h[k], packed.det_tan_v[k], packed.det_rows[k], packed.det_cols[k])
            if hit != int(pixel):
                return 0.0
        to_det = packed.det_pos[k] - x
        r = float(np.linalg.norm(to_det))
        w = to_det / r
        _, blocker = hit_surfaces(x[0], x[1], x[2], w[0], w[1], w[2], packed.eps, r - packed.eps, packed.surf_kinds, packed.surf_geom)
        if blocker >= 0:
            return 0.0
        d = np.asarray(omega_prev, dtype=np.float64)
        cos_bd = float(np.dot(d / np.linalg.norm(d), w))
        phase = TransportService._local_phase(scene, params, x, cos_bd)
        return phase * TransportService.transmittance(scene, params, x, packed.det_pos[k]) / (r * r)

    @staticmethod
    def _local_phase(scene: Scene, params: SceneParams, x, cos_theta: float) -> float:
        if not scene.species:
            return 1.0 / (4.0 * math.pi)
        try:
            return float(SceneService.mixture_phase_eval(scene, x, cos_theta, params))
        except SceneDomainError:
            # no scattering material at x: plain average of the species phase functions
            return float(np.mean([SceneService.phase_eval(s.phase, cos_theta) for s in scene.species]))

    # -------------------------------------------------------- path densities

    @staticmethod
    def _vertex_mixture(scene: Scene, params: SceneParams, v: int, mu: float) -> Tuple[float, float, float]:
        """(A, M, W) at voxel v: scattering kernel, sampled direction density times W, selection normalizer"""
        beta = params.beta[:, v]
        albedo = np.array([s.albedo for s in scene.species], dtype=np.float64)
        f = np.array([SceneService.phase_eval(s.phase, mu) for s in scene.species], dtype=np.float64)
        weights = np.array(beta, dtype=np.float64)
        if scene.species_sampling == SpeciesSampling.scattering and float(np.dot(albedo, beta)) > 0.0:
            weights = albedo * beta
        return float(np.sum(albedo * beta * f)), float(np.dot(weights, f)), float(weights.sum())

    @staticmethod
    def _emission_log_density(scene: Scene) -> float:
        prefactor, _ = SceneService.light_prefactor(scene)
        return -math.log(prefactor / scene.light.radiance)

    @staticmethod
    def _segment_log_factors(scene: Scene, params: SceneParams, path: PathRecord, b: int) -> Tuple[float, float]:
        """(log T, log G) of the segment arriving at vertex b"""
        segment = path.segments[b - 1]
        total = params.beta_total
        truncated_tail = path.truncated and b == path.size
        log_t = 0.0 if truncated_tail else -float(np.dot(total[segment.voxels], segment.lengths))
        if path.kinds[b] == VertexKind.escape:
            return log_t, 0.0
        r = float(np.linalg.norm(path.vertices[b] - path.vertices[b - 1]))
        return log_t, -2.0 * math.log(r)

    @staticmethod
    def log_path_pdf(scene: Scene, params: SceneParams, path: PathRecord) -> float:
        """Log of the sampling density of the path, every factor written out (no cancellation)"""
        log_mu = TransportService._emission_log_density(scene)
        for b in range(1, path.size + 1):
            log_t, log_g = TransportService._segment_log_factors(scene, params, path, b)
            log_mu += log_t + log_g
            kind = path.kinds[b]
            if kind == VertexKind.scatter:
                v = int(path.voxels[b])
                beta_v = float(params.beta_total[v])
                _, m, w = TransportService._vertex_mixture(scene, params, v, float(path.cos[b]))
                if beta_v <= 0.0 or m <= 0.0 or w <= 0.0:
                    return -math.inf
                log_mu += math.log(beta_v * m / w)
            elif kind == VertexKind.reflect:
                prev, cur = path.vertices[b - 1], path.vertices[b]
                incoming = (cur - prev) / np.linalg.norm(cur - prev)
                outgoing = path.directions()[b]
                normal = TransportService._surface_normal(scene, int(path.surfaces[b]), cur, incoming)
                log_mu += math.log(abs(float(np.dot(normal, outgoing))) / math.pi)
        return log_mu

    @staticmethod
    def path_pdf(scene: Scene, params: SceneParams, path: PathRecord) -> float:
        log_mu = TransportService.log_path_pdf(scene, params, path)
        return 0.0 if log_mu == -math.inf else math.exp(log_mu)

    @staticmethod
    def _surface_normal(scene: Scene, k: int, point: np.ndarray, incoming: np.ndarray) -> np.ndarray:
        surface = scene.surfaces[k]
        if surface.kind == SurfaceKind.sphere:
            normal = (point - np.array(surface.center)) / surface.radius
        else:
            normal = np.zeros(3)
            normal[surface.axis] = 1.0
        if float(np.dot(normal, incoming)) > 0.0:
            normal = -normal
        return normal / np.linalg.norm(normal)

    @staticmethod
    def _phong_weight(scene: Scene, params: SceneParams, s: int, c: float) -> float:
        """rho times the Phong factor of surface s at mirror cosine c"""
        c = min(max(c, 0.0), 1.0)
        return scene.surfaces[s].reflectance * (1.0 - params.kappa[s] + params.kappa[s] * c ** params.gamma[s])

    @staticmethod
    def path_contribution(
        scene: Scene, params: SceneParams, path: PathRecord, detector: int, pixel: Optional[int] = None
    ) -> float:
        """Measurement contribution of the path to one detector (one pixel, or the whole frame).

        Every local estimate at vertex b adds L_e * F(x_0..x_b) * event_b times the sampling density of
        the vertices after b, so contribution / path_pdf is the per-event sum the renderer accumulates.
        """
        log_mu_total = TransportService.log_path_pdf(scene, params, path)
        if log_mu_total == -math.inf:
            return 0.0
        packed = SceneService.pack(scene)
        directions = path.directions()
        log_f = 0.0
        log_mu = TransportService._emission_log_density(scene)
        total = 0.0
        for b in range(1, path.size + 1):
            log_t, log_g = TransportService._segment_log_factors(scene, params, path, b)
            log_f += log_t + log_g
            log_mu += log_t + log_g
            kind = path.kinds[b]
            if kind not in (VertexKind.scatter, VertexKind.reflect):
                break
            v = int(path.voxels[b])
            s = int(path.surfaces[b])
            # density of stopping at a scatter vertex carries beta there
            log_mu_event = log_mu + (math.log(params.beta_total[v]) if kind == VertexKind.scatter else 0.0)
            for le in path.local_estimates:
                if le.vertex != b or le.detector != detector:
                    continue
                if pixel is not None:
                    k = le.detector
                    hit = pixel_of(le.u, le.v, packed.det_tan_h[k], packed.det_tan_v[k], packed.det_rows[k], packed.det_cols[k])
                    if hit != int(pixel):
                        continue
                tau = float(np.dot(params.beta_total[le.intersections.voxels], le.intersections.lengths))
                if kind == VertexKind.scatter:
                    kernel, _, _ = TransportService._vertex_mixture(scene, params, v, le.cos)
                else:
                    kernel = TransportService._phong_weight(scene, params, s, le.cos)
                event = kernel * math.exp(-tau) * le.geom
                if event > 0.0:
                    total += scene.light.radiance * math.exp(log_f + log_mu_total - log_mu_event) * event
            if kind == VertexKind.scatter:
                a, m, w = TransportService._vertex_mixture(scene, params, v, float(path.cos[b]))
                if a <= 0.0:
                    break
                log_f += math.log(a)
                log_mu += math.log(params.beta_total[v] * m / w)
            else:
                weight = TransportService._phong_weight(scene, params, s, float(path.cos[b]))
                if weight <= 0.0:
                    break
                incoming = directions[b - 1]
                normal = TransportService._surface_normal(scene, s, path.vertices[b], incoming)
                cos_out = abs(float(np.dot(normal, directions[b])))
                log_f += math.log(weight * cos_out / math.pi)
                log_mu += math.log(cos_out / math.pi)
        return total
