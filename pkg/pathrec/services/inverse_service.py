import json
import logging
import math
import time
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from pathrec.kernels.geometry import pixel_of, project
from pathrec.models.errors import ConfigError, NumericAbort
from pathrec.models.inverse import AdamConfig, IterationRecord, OptState, ReconstructionResult, Schedule
from pathrec.models.path import ProblemKind
from pathrec.models.scene import Scene, SceneParams, VoxelGridField
from pathrec.services.gradient_service import GradientService
from pathrec.services.grid_io_service import GridIOService
from pathrec.services.output_service import CHECKPOINT_CSV_HEADER, OutputService
from pathrec.services.pathstore_service import PathStoreService
from pathrec.services.scene_service import SceneService
from pathrec.services.transport_service import DEFAULT_MAX_BOUNCES, TransportService

logger = logging.getLogger(__name__)

CARVE_THRESHOLD = 0.02


class InverseService:
    """Loss, ADAM, space carving and the path-recycling reconstruction loop"""

    def __init__(self, workers: int = 1, compat: bool = False, self_normalize: bool = False, sort_secondary: bool = False):
        self.workers = max(1, int(workers))
        self.transport = TransportService(workers=self.workers)
        self.gradients = GradientService(workers=self.workers, compat=compat)
        self.self_normalize = self_normalize
        self.sort_secondary = sort_secondary

    # ------------------------------------------------------------------ loss

    @staticmethod
    def loss(forward_images: List[np.ndarray], gt_images: List[np.ndarray]) -> float:
        """Half the squared L2 distance summed over all detectors"""
        residual = GradientService.residual(forward_images, gt_images)
        return 0.5 * float(np.dot(residual, residual))

    @staticmethod
    def metrics(estimate: np.ndarray, truth: np.ndarray) -> Tuple[float, float]:
        """(eps, delta): relative L1 error and relative mass bias"""
        estimate = np.asarray(estimate, dtype=np.float64).ravel()
        truth = np.asarray(truth, dtype=np.float64).ravel()
        if estimate.shape != truth.shape:
            error_msg = f"Cannot compare fields of {estimate.size} and {truth.size} values"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        norm = float(np.abs(truth).sum())
        if norm == 0.0:
            error_msg = "Reference field has zero L1 norm"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        eps = float(np.abs(truth - estimate).sum()) / norm
        delta = (norm - float(np.abs(estimate).sum())) / norm
        return eps, delta

    # ------------------------------------------------------------------ ADAM

    @staticmethod
    def adam_step(
        state: OptState,
        gradient: np.ndarray,
        config: AdamConfig,
        lower: Optional[np.ndarray] = None,
        upper: Optional[np.ndarray] = None,
    ) -> OptState:
        """Bias-corrected ADAM update followed by projection onto [lower, upper]"""
        gradient = np.asarray(gradient, dtype=np.float64)
        if gradient.shape != state.m.shape:
            error_msg = f"Gradient shape {gradient.shape} does not match unknowns {state.m.shape}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        t = state.t + 1
        first = config.beta1 * state.first_moment + (1.0 - config.beta1) * gradient
        second = config.beta2 * state.second_moment + (1.0 - config.beta2) * gradient * gradient
        first_hat = first / (1.0 - config.beta1 ** t)
        second_hat = second / (1.0 - config.beta2 ** t)
        alpha = config.alpha
        if config.step_scale is not None:
            if len(config.step_scale) != state.m.size:
                error_msg = f"Step scale has {len(config.step_scale)} entries for {state.m.size} unknowns"
                logger.error(f"❌ {error_msg}")
                raise ConfigError(error_msg)
            alpha = config.alpha * np.asarray(config.step_scale, dtype=np.float64)
        m = state.m - alpha * first_hat / (np.sqrt(second_hat) + config.epsilon)
        if config.project:
            if lower is not None:
                m = np.maximum(m, lower)
            if upper is not None:
                m = np.minimum(m, upper)
        return state.model_copy(update={"m": m, "first_moment": first, "second_moment": second, "t": t})

    @staticmethod
    def bounds(kind: ProblemKind, size: int) -> Tuple[np.ndarray, np.ndarray]:
        if kind == ProblemKind.phong:
            return np.array([0.0, 0.0]), np.array([1.0, np.inf])
        return np.zeros(size), np.full(size, np.inf)

    # ---------------------------------------------------------- space carving

    @staticmethod
    def space_carve(
        scene: Scene,
        gt_images: List[np.ndarray],
        threshold: float = CARVE_THRESHOLD,
        mean_extinction: float = 1.0,
        min_views: Optional[int] = None,
        dilation: int = 1,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """(occupancy mask, initial values): voxels bright in every view get mean_extinction"""
        if len(scene.detectors) < 2:
            error_msg = f"Space carving needs at least 2 detectors, scene has {len(scene.detectors)}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        if len(gt_images) != len(scene.detectors):
            error_msg = f"Got {len(gt_images)} images for {len(scene.detectors)} detectors"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        packed = SceneService.pack(scene)
        centers = scene.grid.voxel_centers()
        votes = np.zeros(centers.shape[0], dtype=np.int64)
        for k, image in enumerate(gt_images):
            image = np.asarray(image, dtype=np.float64)
            rows, cols = image.shape
            peak = float(image.max()) if image.size else 0.0
            if peak <= 0.0:
                continue
            bright = image.ravel() > threshold * peak
            tan_h = packed.det_tan_h[k]
            tan_v = packed.det_tan_v[k]
            for i, c in enumerate(centers):
                inside, u, v = project(packed.det_pos[k], packed.det_basis[k], tan_h, tan_v, c[0], c[1], c[2])
                if not inside:
                    continue
                pixel = pixel_of(u, v, tan_h, tan_v, rows, cols)
                if pixel >= 0 and bright[pixel]:
                    votes[i] += 1
        required = len(scene.detectors) if min_views is None else int(min_views)
        mask = votes >= required
        if dilation > 0 and mask.any():
            nx, ny, nz = scene.grid.dims
            volume = ndimage.binary_dilation(mask.reshape(nz, ny, nx), iterations=int(dilation))
            mask = volume.ravel()
        values = np.where(mask, float(mean_extinction), 0.0)
        logger.info(f"📊 Space carving - occupied voxels: {int(mask.sum())} of {mask.size}")
        return mask, values

    # ------------------------------------------------------------- images

    @staticmethod
    def downsample(image: np.ndarray, rows: int, cols: int) -> np.ndarray:
        """Block sum to (rows, cols); pixel values integrate events over their footprint"""
        image = np.asarray(image, dtype=np.float64)
        big_rows, big_cols = image.shape
        if big_rows % rows or big_cols % cols:
            error_msg = f"Cannot reduce a {big_rows}x{big_cols} image to {rows}x{cols}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        fr, fc = big_rows // rows, big_cols // cols
        return image.reshape(rows, fr, cols, fc).sum(axis=(1, 3))

    # -------------------------------------------------------------- the loop

    def reconstruct(
        self,
        scene: Scene,
        gt_images: List[np.ndarray],
        adam: AdamConfig,
        schedule: Schedule,
        seed: int,
        initial: Optional[SceneParams] = None,
        truth: Optional[np.ndarray] = None,
        out_dir: Optional[Union[str, Path]] = None,
        checkpoint_every: int = 10,
        max_bounces: int = DEFAULT_MAX_BOUNCES,
    ) -> ReconstructionResult:
        """Gradient descent on the unknowns with path recycling.

        A fresh store is traced under the current parameters every recycle_period
        iterations; in between the store is re-evaluated under the current parameters.
        Stages advance when the loss saturates; a new stage's path count takes effect
        at the next scheduled resample.
        """
        kind, _ = GradientService.problem(scene)
        params = initial or SceneService.scene_params(scene)
        state = OptState.start(GradientService.unknowns(scene, params))
        lower, upper = self.bounds(kind, state.m.size)
        out_dir = Path(out_dir) if out_dir is not None else None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "loss.csv" if out_dir is not None else None
        checkpoint_csv = out_dir / "checkpoints.csv" if out_dir is not None else None
        for stale in (csv_path, checkpoint_csv):
            if stale is not None and stale.exists():
                stale.unlink()

        stage_index = 0
        stage = schedule.stages[0]
        stage_scene, stage_gt = self._stage_inputs(scene, gt_images, stage.rows, stage.cols)
        n_paths = stage.n_paths
        stage_losses: List[float] = []
        history: List[IterationRecord] = []
        stage_changes: List[int] = []
        store = None
        params_ref = params
        sampling_phases = 0
        start = time.time()
        logger.info(
            f"🔄 Reconstruction - {kind.value}, unknowns: {state.m.size}, iterations: {schedule.max_iterations}, "
            f"recycle period: {schedule.recycle_period}, stages: {len(schedule.stages)}"
        )

        for t in range(schedule.max_iterations):
            params = GradientService.with_unknowns(scene, params, state.m)
            resampled = t % schedule.recycle_period == 0
            if resampled:
                params_ref = params
                store = self.transport.trace_store(
                    stage_scene, params_ref, n_paths, seed + sampling_phases, max_bounces, generation=sampling_phases
                )
                store = PathStoreService.sort_by_size(store, secondary_key=self.sort_secondary)
                sampling_phases += 1
                logger.debug(f"   Resampled at iteration {t}: generation {store.generation}, N={n_paths}")

            loss, gradient, _ = self.gradients.loss_and_gradient(
                store, stage_scene, params, params_ref, stage_gt, self_normalize=self.self_normalize
            )
            grad = gradient.to_dense()
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                error_msg = f"Non-finite loss or gradient at iteration {t} (loss={loss})"
                logger.error(f"❌ {error_msg}")
                raise NumericAbort(error_msg)
            state = self.adam_step(state, grad, adam, lower, upper)
            state = state.model_copy(
                update={"generation": sampling_phases, "params_ref": params_ref, "loss_history": state.loss_history + [loss]}
            )

            eps = delta = None
            if truth is not None:
                eps, delta = self.metrics(state.m, truth)
            record = IterationRecord(
                iteration=t, time_s=time.time() - start, loss=loss, eps=eps, delta=delta,
                stage=stage_index, phase=sampling_phases - 1, resampled=resampled,
            )
            history.append(record)
            if csv_path is not None:
                OutputService.append_csv_row(csv_path, record.csv_row())
            if out_dir is not None and checkpoint_every > 0 and (t + 1) % checkpoint_every == 0:
                self._checkpoint(out_dir, scene, kind, state.m, t + 1)
                OutputService.append_csv_row(checkpoint_csv, record.checkpoint_row(), header=CHECKPOINT_CSV_HEADER)
            logger.debug(f"   iter {t}: loss={loss:.6e} eps={eps} stage={stage_index}")

            stage_losses.append(loss)
            if stage_index + 1 < len(schedule.stages) and self._saturated(stage_losses, schedule):
                stage_index += 1
                stage = schedule.stages[stage_index]
                stage_scene, stage_gt = self._stage_inputs(scene, gt_images, stage.rows, stage.cols)
                n_paths = stage.n_paths
                stage_losses = []
                stage_changes.append(t + 1)
                logger.info(f"📋 Stage {stage_index}: {stage.rows}x{stage.cols} pixels, N={stage.n_paths}")

        params = GradientService.with_unknowns(scene, params, state.m)
        elapsed = time.time() - start
        logger.info(
            f"✅ Reconstruction finished - loss: {history[-1].loss:.6e}, sampling phases: {sampling_phases}, "
            f"{len(history) / elapsed if elapsed > 0 else 0.0:.2f} it/s"
        )
        return ReconstructionResult(
            params=params,
            m=state.m,
            history=history,
            sampling_phases=sampling_phases,
            stage_changes=stage_changes,
            elapsed_s=elapsed,
        )

    @staticmethod
    def _saturated(losses: List[float], schedule: Schedule) -> bool:
        window = schedule.saturation_window
        if len(losses) <= window:
            return False
        before = losses[-window - 1]
        if before <= 0.0:
            return True
        return (before - losses[-1]) / before < schedule.saturation_threshold

    def _stage_inputs(
        self, scene: Scene, gt_images: List[np.ndarray], rows: int, cols: int
    ) -> Tuple[Scene, List[np.ndarray]]:
        stage_scene = scene.at_resolution(rows, cols)
        return stage_scene, [self.downsample(image, rows, cols) for image in gt_images]

    @staticmethod
    def _checkpoint(out_dir: Path, scene: Scene, kind: ProblemKind, m: np.ndarray, iteration: int) -> None:
        if kind == ProblemKind.phong:
            path = out_dir / f"checkpoint_{iteration:05d}.json"
            path.write_text(json.dumps({"iteration": iteration, "kappa_s": float(m[0]), "gamma": float(m[1])}))
        else:
            path = out_dir / f"checkpoint_{iteration:05d}.vgrd"
            GridIOService.save_grid(path, VoxelGridField.filled(scene.grid, 0.0).with_values(m))
        logger.info(f"💾 Checkpoint written: {path}")
