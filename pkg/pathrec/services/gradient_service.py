import logging
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from pathrec.kernels.evaluator import (
    PROBLEM_PHONG,
    PROBLEM_TOMOGRAPHY,
    jacobian_paths,
    loss_gradient_paths,
    reduce_phong_gradient,
    reduce_voxel_gradient,
    tomography_score,
)
from pathrec.kernels.optics import phong_log_derivatives
from pathrec.models.errors import ConfigError
from pathrec.models.path import (
    EstimatorOutput,
    Evaluation,
    PathRecord,
    PathStore,
    ProblemKind,
    SparseGradient,
    VertexKind,
)
from pathrec.models.scene import Scene, SceneParams, UnknownKind
from pathrec.services.pathstore_service import ParamArrays, PathStoreService, path_chunks
from pathrec.services.scene_service import SceneService

logger = logging.getLogger(__name__)


class GradientService:
    """Path score functions and Monte-Carlo derivatives of the forward model and the loss"""

    def __init__(self, workers: int = 1, compat: bool = False):
        self.workers = max(1, int(workers))
        self.compat = bool(compat)
        self.store_service = PathStoreService(workers=self.workers)

    # ---------------------------------------------------------------- unknowns

    @staticmethod
    def problem(scene: Scene) -> Tuple[ProblemKind, int]:
        """(problem kind, target) where target is the unknown species or surface index"""
        unknown = scene.unknown
        if unknown.kind == UnknownKind.phong:
            if unknown.surface is None or not 0 <= unknown.surface < len(scene.surfaces):
                error_msg = f"Phong unknown needs a valid surface index, got {unknown.surface}"
                logger.error(f"❌ {error_msg}")
                raise ConfigError(error_msg)
            return ProblemKind.phong, int(unknown.surface)
        try:
            return ProblemKind.tomography, scene.species_index(unknown.species)
        except KeyError:
            error_msg = f"Unknown species '{unknown.species}' is not in the scene"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)

    @staticmethod
    def unknowns(scene: Scene, params: SceneParams) -> np.ndarray:
        """The unknown vector m: one species' extinction grid, or (kappa_s, gamma) of one surface"""
        kind, target = GradientService.problem(scene)
        if kind == ProblemKind.phong:
            return np.array([params.kappa[target], params.gamma[target]], dtype=np.float64)
        return np.array(params.beta[target], dtype=np.float64)

    @staticmethod
    def with_unknowns(scene: Scene, params: SceneParams, m: np.ndarray) -> SceneParams:
        kind, target = GradientService.problem(scene)
        m = np.asarray(m, dtype=np.float64)
        if kind == ProblemKind.phong:
            return params.with_phong(target, float(m[0]), float(m[1]))
        return params.with_species_values(target, m)

    # ------------------------------------------------------------ path scores

    @staticmethod
    def psf_tomography(
        scene: Scene, params: SceneParams, path: PathRecord, event: int, compat: bool = False
    ) -> SparseGradient:
        """d log f / d beta_target of the path prefix ending in local estimate `event`"""
        _, target = GradientService.problem(scene)
        arrays = ParamArrays(params)
        packed = SceneService.pack(scene)
        le = path.local_estimates[event]
        n_voxels = scene.grid.n_voxels
        score = np.zeros(n_voxels, dtype=np.float64)
        for segment in path.segments[: le.vertex]:
            np.subtract.at(score, segment.voxels, segment.lengths)
        np.subtract.at(score, le.intersections.voxels, le.intersections.lengths)
        for b in range(1, le.vertex + 1):
            if path.kinds[b] != VertexKind.scatter:
                continue
            mu = le.cos if b == le.vertex else float(path.cos[b])
            v = int(path.voxels[b])
            score[v] += tomography_score(
                arrays.beta, arrays.total, v, packed.albedo, packed.kinds, packed.gs, packed.mode, target, compat, mu
            )
        return SparseGradient.from_dense(score, ProblemKind.tomography)

    @staticmethod
    def psf_phong(
        scene: Scene, params: SceneParams, path: PathRecord, event: Optional[int] = None
    ) -> Tuple[float, float]:
        """(d log f / d kappa_s, d log f / d gamma) over reflections on the target surface.

        With event given, only the prefix up to that local estimate counts and its own
        vertex uses the cosine of the connection.
        """
        _, target = GradientService.problem(scene)
        kappa = float(params.kappa[target])
        gamma = float(params.gamma[target])
        last = path.size if event is None else path.local_estimates[event].vertex
        d_kappa = 0.0
        d_gamma = 0.0
        for b in range(1, last + 1):
            if path.kinds[b] != VertexKind.reflect or int(path.surfaces[b]) != target:
                continue
            c = float(path.cos[b])
            if event is not None and b == last:
                c = path.local_estimates[event].cos
            dk, dg = phong_log_derivatives(kappa, gamma, c)
            d_kappa += dk
            d_gamma += dg
        return d_kappa, d_gamma

    # ------------------------------------------------------------ estimators

    def _kernel_args(self, scene: Scene, params_t: SceneParams):
        kind, target = self.problem(scene)
        packed = SceneService.pack(scene)
        problem = PROBLEM_PHONG if kind == ProblemKind.phong else PROBLEM_TOMOGRAPHY
        return kind, target, packed, problem, ParamArrays(params_t)

    def grad_forward(
        self, store: PathStore, scene: Scene, params_t: SceneParams, params_ref: SceneParams
    ) -> EstimatorOutput:
        """Forward images plus the Jacobian dF/dm (rows: pixels of all detectors, columns: unknowns)"""
        evaluation = self.store_service.evaluate(store, scene, params_t, params_ref)
        output = self.store_service.reduce(store, scene, evaluation)
        kind, target, packed, problem, t = self._kernel_args(scene, params_t)
        n_rows = int(scene.pixel_offsets[-1])

        def run(chunk: Tuple[int, int]):
            return jacobian_paths(
                chunk[0], chunk[1], store.path_offsets, store.vertex_kind, store.vertex_cos,
                store.vertex_surface, store.vertex_voxel, store.segment_offsets, store.segment_voxels,
                store.segment_lengths, store.le_offsets, evaluation.le_row, store.le_cos,
                store.le_segment_offsets, store.le_segment_voxels, store.le_segment_lengths,
                t.beta, t.total, packed.albedo, packed.kinds, packed.gs, packed.mode, t.kappa, t.gamma,
                problem, target, self.compat, evaluation.le_value, n_rows,
            )

        parts = self.store_service.map_chunks(run, path_chunks(store.n_paths))
        if kind == ProblemKind.phong:
            dense = np.zeros((n_rows, 2), dtype=np.float64)
            for part in parts:
                dense += part[3]
            jacobian = sp.csr_matrix(dense / store.n_paths)
        else:
            rows = np.concatenate([part[0] for part in parts])
            cols = np.concatenate([part[1] for part in parts])
            vals = np.concatenate([part[2] for part in parts]) / store.n_paths
            jacobian = sp.coo_matrix((vals, (rows, cols)), shape=(n_rows, scene.grid.n_voxels)).tocsr()
        logger.debug(f"   Jacobian {jacobian.shape} with {jacobian.nnz} stored entries")
        return output.model_copy(update={"jacobian": jacobian, "kind": kind})

    @staticmethod
    def _flatten(images: List[np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(image, dtype=np.float64).ravel() for image in images])

    @staticmethod
    def residual(forward_images: List[np.ndarray], gt_images: List[np.ndarray]) -> np.ndarray:
        if len(forward_images) != len(gt_images) or any(
            np.shape(f) != np.shape(g) for f, g in zip(forward_images, gt_images)
        ):
            error_msg = (
                f"Image shapes differ: {[np.shape(f) for f in forward_images]} vs {[np.shape(g) for g in gt_images]}"
            )
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        return GradientService._flatten(forward_images) - GradientService._flatten(gt_images)

    @staticmethod
    def loss_gradient(forward: EstimatorOutput, gt_images: List[np.ndarray]) -> SparseGradient:
        """Sum over pixels of (F - I_gt) dF/dm"""
        if forward.jacobian is None:
            raise ConfigError("loss_gradient needs an estimator output with a Jacobian")
        residual = GradientService.residual(forward.images, gt_images)
        dense = np.asarray(forward.jacobian.T @ residual).ravel()
        return SparseGradient.from_dense(dense, forward.kind)

    def loss_and_gradient(
        self,
        store: PathStore,
        scene: Scene,
        params_t: SceneParams,
        params_ref: SceneParams,
        gt_images: List[np.ndarray],
        self_normalize: bool = False,
    ) -> Tuple[float, SparseGradient, EstimatorOutput]:
        """Loss and its gradient in one pass over the store, without forming the Jacobian"""
        evaluation = self.store_service.evaluate(store, scene, params_t, params_ref, self_normalize=self_normalize)
        output = self.store_service.reduce(store, scene, evaluation)
        residual = self.residual(output.images, gt_images)
        loss = 0.5 * float(np.dot(residual, residual))
        gradient = self._fused_gradient(store, scene, params_t, evaluation, residual)
        return loss, gradient, output

    def _fused_gradient(
        self, store: PathStore, scene: Scene, params_t: SceneParams, evaluation: Evaluation, residual: np.ndarray
    ) -> SparseGradient:
        kind, target, packed, problem, t = self._kernel_args(scene, params_t)
        ix_grad = np.zeros(store.segment_voxels.shape[0], dtype=np.float64)
        le_ix_grad = np.zeros(store.le_segment_voxels.shape[0], dtype=np.float64)
        n_vertices = store.vertex_kind.shape[0]
        vtx_grad = np.zeros(n_vertices, dtype=np.float64)
        vtx_dk = np.zeros(n_vertices, dtype=np.float64)
        vtx_dg = np.zeros(n_vertices, dtype=np.float64)
        order = store.order
        chunks = path_chunks(store.n_paths)

        def slots(chunk: Tuple[int, int]):
            loss_gradient_paths(
                order[chunk[0]: chunk[1]], store.path_offsets, store.vertex_kind, store.vertex_cos,
                store.vertex_surface, store.vertex_voxel, store.segment_offsets, store.segment_lengths,
                store.le_offsets, evaluation.le_row, store.le_cos, store.le_segment_offsets,
                store.le_segment_lengths, t.beta, t.total, packed.albedo, packed.kinds, packed.gs, packed.mode,
                t.kappa, t.gamma, problem, target, self.compat, residual, evaluation.le_value,
                ix_grad, le_ix_grad, vtx_grad, vtx_dk, vtx_dg,
            )

        self.store_service.map_chunks(slots, chunks)
        scale = 1.0 / (store.n_paths * evaluation.normalizer)

        if kind == ProblemKind.phong:
            def reduce(chunk: Tuple[int, int]):
                return reduce_phong_gradient(chunk[0], chunk[1], store.path_offsets, vtx_dk, vtx_dg)

            total = np.zeros(2, dtype=np.float64)
        else:
            n_voxels = scene.grid.n_voxels

            def reduce(chunk: Tuple[int, int]):
                return reduce_voxel_gradient(
                    chunk[0], chunk[1], store.path_offsets, store.vertex_kind, store.vertex_voxel,
                    store.segment_offsets, store.segment_voxels, store.le_offsets, store.le_segment_offsets,
                    store.le_segment_voxels, ix_grad, le_ix_grad, vtx_grad, n_voxels,
                )

            total = np.zeros(n_voxels, dtype=np.float64)
        for partial in self.store_service.map_chunks(reduce, chunks):
            total += partial
        gradient = total * scale
        if not np.all(np.isfinite(gradient)):
            logger.warning(f"⚠️  Gradient has {int(np.sum(~np.isfinite(gradient)))} non-finite entries")
        return SparseGradient.from_dense(gradient, kind)

    @staticmethod
    def detector_sum_gradient(forward: EstimatorOutput, detectors: List[int]) -> np.ndarray:
        """Gradient of the summed intensity of the listed detectors"""
        total = np.zeros(forward.jacobian.shape[1], dtype=np.float64)
        for d in detectors:
            total += forward.detector_gradient(d).to_dense()
        return total
