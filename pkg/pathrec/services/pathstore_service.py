import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Sequence, Tuple, TypeVar, Union

import numpy as np

from pathrec.kernels.evaluator import EXP_CLAMP, assign_rows, evaluate_paths, reduce_images
from pathrec.kernels.geometry import segment_walk
from pathrec.kernels.optics import mixture_terms
from pathrec.models.errors import ConfigError, GridFormatError, InvariantViolation
from pathrec.models.path import (
    EstimatorOutput,
    Evaluation,
    PathRecord,
    PathStore,
    SegmentIntersections,
    VertexKind,
)
from pathrec.models.scene import KernelScene, Scene, SceneParams
from pathrec.services.scene_service import SceneService

logger = logging.getLogger(__name__)

CHUNK_PATHS = 2048

STORE_MAGIC = b"PSTR"
STORE_VERSION = 1
# magic, version, n_paths, seed, max_bounces, prefactor, generation, sorted, ref params id
_STORE_HEADER = struct.Struct("<4sIQQIdIB16s")

# name, dtype, components per element
STORE_LAYOUT = [
    ("order", "<i8", 1),
    ("path_offsets", "<i8", 1),
    ("truncated", "<i8", 1),
    ("direction0", "<f8", 3),
    ("vertex_pos", "<f8", 3),
    ("vertex_kind", "<i8", 1),
    ("vertex_species", "<i8", 1),
    ("vertex_cos", "<f8", 1),
    ("vertex_surface", "<i8", 1),
    ("vertex_voxel", "<i8", 1),
    ("segment_offsets", "<i8", 1),
    ("segment_voxels", "<i8", 1),
    ("segment_lengths", "<f8", 1),
    ("le_offsets", "<i8", 1),
    ("le_detector", "<i8", 1),
    ("le_u", "<f8", 1),
    ("le_v", "<f8", 1),
    ("le_cos", "<f8", 1),
    ("le_geom", "<f8", 1),
    ("le_segment_offsets", "<i8", 1),
    ("le_segment_voxels", "<i8", 1),
    ("le_segment_lengths", "<f8", 1),
]

T = TypeVar("T")


def path_chunks(n_paths: int, size: int = CHUNK_PATHS) -> List[Tuple[int, int]]:
    """Fixed [first, last) path-index ranges; reductions add their partials in this order"""
    return [(a, min(a + size, n_paths)) for a in range(0, n_paths, size)]


def _offsets(counts: np.ndarray) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)


class ParamArrays:
    """Writable contiguous copies of a parameter set, as the kernels take them"""

    def __init__(self, params: SceneParams):
        self.beta = np.array(params.beta, dtype=np.float64)
        self.total = np.ascontiguousarray(self.beta.sum(axis=0))
        self.kappa = np.array(params.kappa, dtype=np.float64)
        self.gamma = np.array(params.gamma, dtype=np.float64)


class PathStoreService:
    def __init__(self, workers: int = 1):
        self.workers = max(1, int(workers))

    def map_chunks(self, fn: Callable[[Tuple[int, int]], T], chunks: Sequence[Tuple[int, int]]) -> List[T]:
        """Run fn over chunks on the worker pool; results come back in chunk order"""
        if self.workers == 1 or len(chunks) <= 1:
            return [fn(chunk) for chunk in chunks]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, chunks))

    # ---------------------------------------------------------------- assembly

    @staticmethod
    def assemble(
        chunks: List[tuple], seed: int, max_bounces: int, prefactor: float, generation: int, ref_params_id: str
    ) -> PathStore:
        """Concatenate trace_chunk outputs (in path-index order) into one store"""
        parts = list(zip(*chunks))
        (
            path_vertices, truncated, direction0,
            vpos, vkind, vspecies, vcos, vsurf, vvoxel, vseg, vle,
            ix_vox, ix_len,
            le_det, le_u, le_v, le_cos, le_geom, le_seg,
            le_ix_vox, le_ix_len,
        ) = [np.concatenate(part) for part in parts]
        n_paths = int(path_vertices.shape[0])
        store = PathStore(
            seed=int(seed),
            max_bounces=int(max_bounces),
            prefactor=float(prefactor),
            generation=int(generation),
            ref_params_id=ref_params_id,
            sorted_flag=False,
            order=np.arange(n_paths, dtype=np.int64),
            path_offsets=_offsets(path_vertices),
            truncated=truncated.astype(np.int64),
            direction0=direction0.reshape(-1, 3),
            vertex_pos=vpos.reshape(-1, 3),
            vertex_kind=vkind,
            vertex_species=vspecies,
            vertex_cos=vcos,
            vertex_surface=vsurf,
            vertex_voxel=vvoxel,
            segment_offsets=_offsets(vseg),
            segment_voxels=ix_vox,
            segment_lengths=ix_len,
            le_offsets=_offsets(vle),
            le_detector=le_det,
            le_u=le_u,
            le_v=le_v,
            le_cos=le_cos,
            le_geom=le_geom,
            le_segment_offsets=_offsets(le_seg),
            le_segment_voxels=le_ix_vox,
            le_segment_lengths=le_ix_len,
        )
        stats = store.stats()
        logger.info(
            f"📊 Path store generation {generation} - paths: {stats.n_paths}, mean B: {stats.mean_size:.2f}, "
            f"max B: {stats.max_size}, truncated: {stats.n_truncated}, size: {stats.nbytes / 2**20:.1f} MiB"
        )
        logger.debug(
            f"   vertices: {stats.n_vertices}, intersections: {stats.n_intersections}, "
            f"local estimates: {stats.n_local_estimates} ({stats.n_local_intersections} intersections)"
        )
        return store

    # ----------------------------------------------------------------- sorting

    @staticmethod
    def sort_by_size(store: PathStore, secondary_key: bool = False) -> PathStore:
        """Processing order by ascending B (stable); optionally ties broken by first-scatter voxel"""
        if store.n_paths == 0:
            error_msg = "Cannot sort an empty path store"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        sizes = store.sizes
        if secondary_key:
            # every path has at least one segment, so vertex 1 exists
            second = store.path_offsets[:-1] + 1
            first_voxel = np.where(
                store.vertex_kind[second] == VertexKind.scatter, store.vertex_voxel[second], -1
            )
            order = np.lexsort((first_voxel, sizes))
        else:
            order = np.argsort(sizes, kind="stable")
        logger.debug(f"   Store sorted by path size (secondary key: {secondary_key})")
        return store.model_copy(update={"order": order.astype(np.int64), "sorted_flag": True})

    # -------------------------------------------------------------- evaluation

    @staticmethod
    def _check_compatible(store: PathStore, scene: Scene, params_t: SceneParams, params_ref: SceneParams) -> None:
        if store.ref_params_id and store.ref_params_id != params_ref.params_id:
            error_msg = (
                f"Path store was sampled under parameters {store.ref_params_id}, "
                f"got reference {params_ref.params_id}"
            )
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        if params_t.beta.shape != params_ref.beta.shape or params_t.kappa.shape != params_ref.kappa.shape:
            error_msg = f"Parameter shapes differ: {params_t.beta.shape} vs {params_ref.beta.shape}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        if store.le_detector.size and int(store.le_detector.max()) >= len(scene.detectors):
            error_msg = f"Path store references detector {int(store.le_detector.max())}, scene has {len(scene.detectors)}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)

    @staticmethod
    def pixel_rows(store: PathStore, packed: KernelScene) -> np.ndarray:
        """Measurement row of every local-estimation entry at the scene's current resolution"""
        return assign_rows(
            store.le_detector, store.le_u, store.le_v,
            packed.det_tan_h, packed.det_tan_v, packed.det_rows, packed.det_cols, packed.pixel_offsets,
        )

    def evaluate(
        self, store: PathStore, scene: Scene, params_t: SceneParams, params_ref: SceneParams,
        self_normalize: bool = False,
    ) -> Evaluation:
        """Event values f/mu_ref under params_t for every stored local estimate, plus log r per path"""
        self._check_compatible(store, scene, params_t, params_ref)
        packed = SceneService.pack(scene)
        le_row = self.pixel_rows(store, packed)
        le_value = np.zeros(store.le_detector.shape[0], dtype=np.float64)
        path_logr = np.zeros(store.n_paths, dtype=np.float64)
        t = ParamArrays(params_t)
        ref = ParamArrays(params_ref)
        order = store.order

        def run(chunk: Tuple[int, int]):
            a, b = chunk
            return evaluate_paths(
                order[a:b], store.path_offsets, store.vertex_kind, store.vertex_cos, store.vertex_surface,
                store.vertex_voxel, store.segment_offsets, store.segment_voxels, store.segment_lengths,
                store.le_offsets, le_row, store.le_cos, store.le_geom,
                store.le_segment_offsets, store.le_segment_voxels, store.le_segment_lengths,
                store.truncated, t.beta, ref.beta, t.total, ref.total,
                packed.albedo, packed.kinds, packed.gs, packed.mode,
                packed.surf_rho, t.kappa, t.gamma, store.prefactor,
                le_value, path_logr,
            )

        results = self.map_chunks(run, path_chunks(store.n_paths))
        clamps = sum(int(r[0]) for r in results)
        violations = sum(int(r[1]) for r in results)
        zero_brdf = sum(int(r[2]) for r in results)
        if violations:
            error_msg = f"{violations} stored scatter vertices have zero density under the reference parameters"
            logger.error(f"❌ {error_msg}")
            raise InvariantViolation(error_msg)
        if clamps:
            logger.warning(f"⚠️  {clamps} event weights clamped at exp(±{EXP_CLAMP:.0f})")
        if zero_brdf:
            logger.debug(f"   {zero_brdf} reflection vertices with zero BRDF skipped")

        normalizer = 1.0
        if self_normalize and store.n_paths:
            mean_r = float(np.mean(np.exp(np.clip(path_logr, -EXP_CLAMP, EXP_CLAMP))))
            if mean_r > 0.0:
                normalizer = mean_r
        return Evaluation(
            le_row=le_row,
            le_value=le_value,
            path_logr=path_logr,
            clamp_events=clamps,
            zero_brdf_vertices=zero_brdf,
            normalizer=normalizer,
        )

    def reduce(self, store: PathStore, scene: Scene, evaluation: Evaluation) -> EstimatorOutput:
        """Per-pixel means of the event values, summed in path-index chunk order"""
        offsets = scene.pixel_offsets
        n_rows = int(offsets[-1])

        def run(chunk: Tuple[int, int]):
            return reduce_images(
                chunk[0], chunk[1], store.path_offsets, store.le_offsets,
                evaluation.le_row, evaluation.le_value, n_rows,
            )

        total = np.zeros(n_rows, dtype=np.float64)
        for partial in self.map_chunks(run, path_chunks(store.n_paths)):
            total += partial
        flat = total / (store.n_paths * evaluation.normalizer)
        images = [
            flat[offsets[k]: offsets[k + 1]].reshape(d.rows, d.cols) for k, d in enumerate(scene.detectors)
        ]
        return EstimatorOutput(
            images=images,
            pixel_offsets=offsets,
            n_paths=store.n_paths,
            clamp_events=evaluation.clamp_events,
            zero_brdf_vertices=evaluation.zero_brdf_vertices,
        )

    def recycled_render(
        self, store: PathStore, scene: Scene, params_t: SceneParams, params_ref: SceneParams,
        self_normalize: bool = False,
    ) -> EstimatorOutput:
        """Forward images under params_t from paths sampled under params_ref, no new rays"""
        evaluation = self.evaluate(store, scene, params_t, params_ref, self_normalize=self_normalize)
        return self.reduce(store, scene, evaluation)

    # -------------------------------------------------------- per-path helpers

    @staticmethod
    def log_correction_factor(
        path: PathRecord, scene: Scene, params_t: SceneParams, params_ref: SceneParams
    ) -> float:
        """log mu(path | params_t) - log mu(path | params_ref) in cancelled form"""
        packed = SceneService.pack(scene)
        t = ParamArrays(params_t)
        ref = ParamArrays(params_ref)
        logr = 0.0
        last_segment = len(path.segments) - 1
        for b, segment in enumerate(path.segments):
            if b == last_segment and path.truncated:
                continue
            logr -= float(np.dot(t.total[segment.voxels] - ref.total[segment.voxels], segment.lengths))
        for b in range(1, path.size + 1):
            if path.kinds[b] != VertexKind.scatter:
                continue
            v = int(path.voxels[b])
            mu = float(path.cos[b])
            _, m_ref, w_ref = mixture_terms(ref.beta, v, packed.albedo, packed.kinds, packed.gs, packed.mode, mu)
            if ref.total[v] <= 0.0 or m_ref <= 0.0 or w_ref <= 0.0:
                error_msg = f"Scatter vertex {b} of path {path.path_index} has zero density under the reference"
                logger.error(f"❌ {error_msg}")
                raise InvariantViolation(error_msg)
            _, m_t, w_t = mixture_terms(t.beta, v, packed.albedo, packed.kinds, packed.gs, packed.mode, mu)
            if t.total[v] <= 0.0 or m_t <= 0.0 or w_t <= 0.0:
                return -math.inf
            logr += math.log(t.total[v] * m_t / w_t) - math.log(ref.total[v] * m_ref / w_ref)
        return logr

    @staticmethod
    def correction_factor(path: PathRecord, scene: Scene, params_t: SceneParams, params_ref: SceneParams) -> float:
        logr = PathStoreService.log_correction_factor(path, scene, params_t, params_ref)
        if logr == -math.inf:
            return 0.0
        return math.exp(min(max(logr, -EXP_CLAMP), EXP_CLAMP))

    @staticmethod
    def segment_lengths(path: PathRecord, scene: Scene) -> List[SegmentIntersections]:
        """Voxel intersections of every segment recomputed from the vertices alone"""
        grid = scene.grid
        lo = np.array(scene.bounds_lo, dtype=np.float64)
        hi = np.array(scene.bounds_hi, dtype=np.float64)
        size = np.array(grid.voxel_size, dtype=np.float64)
        dims = np.array(grid.dims, dtype=np.int64)
        segments = []
        for b in range(1, path.size + 1):
            start = path.vertices[b - 1]
            step = path.vertices[b] - start
            length = float(np.linalg.norm(step))
            if length == 0.0:
                segments.append(SegmentIntersections(voxels=[], lengths=[]))
                continue
            d = step / length
            voxels, lengths = segment_walk(start[0], start[1], start[2], d[0], d[1], d[2], length, lo, hi, size, dims)
            segments.append(SegmentIntersections(voxels=voxels, lengths=lengths))
        return segments

    # ------------------------------------------------------------- dump / load

    @staticmethod
    def dump(store: PathStore, path: Union[str, Path]) -> None:
        """PSTR file: fixed header, then every array as (u64 count, little-endian payload)"""
        path = Path(path)
        header = _STORE_HEADER.pack(
            STORE_MAGIC, STORE_VERSION, store.n_paths, int(store.seed), int(store.max_bounces),
            float(store.prefactor), int(store.generation), int(store.sorted_flag),
            store.ref_params_id.encode("ascii")[:16],
        )
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "wb") as f:
                f.write(header)
                for name, dtype, _ in STORE_LAYOUT:
                    array = np.ascontiguousarray(getattr(store, name), dtype=dtype)
                    f.write(struct.pack("<Q", array.size))
                    f.write(array.tobytes())
        except OSError as e:
            error_msg = f"Cannot write path store {path}: {str(e)}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        logger.info(f"💾 Path store written: {path} ({store.n_paths} paths)")

    @staticmethod
    def load(path: Union[str, Path]) -> PathStore:
        path = Path(path)
        if not path.is_file():
            error_msg = f"Path store file not found: {path}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        data = path.read_bytes()
        if data[:4] != STORE_MAGIC:
            raise GridFormatError(f"bad magic {data[:4]!r}, expected {STORE_MAGIC!r}", offset=0)
        if len(data) < _STORE_HEADER.size:
            raise GridFormatError("truncated path store header", offset=len(data))
        _, version, n_paths, seed, max_bounces, prefactor, generation, sorted_flag, ref_id = _STORE_HEADER.unpack_from(
            data, 0
        )
        if version != STORE_VERSION:
            raise GridFormatError(f"unsupported path store version {version}", offset=4)
        offset = _STORE_HEADER.size
        fields = {}
        for name, dtype, width in STORE_LAYOUT:
            if len(data) < offset + 8:
                raise GridFormatError(f"truncated path store at field {name}", offset=offset)
            (count,) = struct.unpack_from("<Q", data, offset)
            offset += 8
            nbytes = 8 * count
            if len(data) < offset + nbytes:
                raise GridFormatError(f"truncated path store payload in field {name}", offset=len(data))
            array = np.frombuffer(data, dtype=dtype, count=count, offset=offset).copy()
            native = np.int64 if dtype == "<i8" else np.float64
            array = array.astype(native)
            fields[name] = array.reshape(-1, 3) if width == 3 else array
            offset += nbytes
        if fields["path_offsets"].shape[0] != n_paths + 1:
            raise GridFormatError(f"path offsets do not match {n_paths} paths", offset=_STORE_HEADER.size)
        return PathStore(
            seed=seed,
            max_bounces=max_bounces,
            prefactor=prefactor,
            generation=generation,
            ref_params_id=ref_id.rstrip(b"\x00").decode("ascii"),
            sorted_flag=bool(sorted_flag),
            **fields,
        )
