import argparse
import logging
from pathlib import Path

from pathrec.cli.common import add_optimizer_flags, add_scene_flags, load_gt_images, run_config
from pathrec.models.config import Command, RunConfig, RuntimeSettings
from pathrec.models.errors import ConfigError
from pathrec.models.path import ProblemKind
from pathrec.models.scene import VoxelGridField
from pathrec.services.gradient_service import GradientService
from pathrec.services.grid_io_service import GridIOService
from pathrec.services.inverse_service import InverseService
from pathrec.services.output_service import OutputService
from pathrec.services.scene_service import SceneService

logger = logging.getLogger(__name__)


def register(subparsers, settings: RuntimeSettings) -> None:
    parser = subparsers.add_parser("reconstruct", help="recover an extinction grid from images")
    add_scene_flags(parser)
    add_optimizer_flags(parser)
    parser.add_argument("--mean-extinction", type=float, default=None, help="initial extinction of occupied voxels")
    parser.add_argument("--carve", action="store_true", help="initialize by space carving")
    parser.add_argument("--true", dest="truth", type=Path, default=None, help="true grid (VGRD) for eps/delta")
    parser.add_argument("--compat-gradient", action="store_true")
    parser.set_defaults(handler=lambda args: execute(_config(args, settings)))


def _config(args: argparse.Namespace, settings: RuntimeSettings) -> RunConfig:
    return run_config(
        args, Command.reconstruct, settings,
        mean_extinction=args.mean_extinction, carve=args.carve, truth=args.truth,
        compat_gradient=args.compat_gradient,
    )


def execute(config: RunConfig) -> None:
    scene = SceneService.load_scene(config.scene)
    kind, _ = GradientService.problem(scene)
    if kind != ProblemKind.tomography:
        error_msg = "reconstruct expects a tomography unknown; use reflectometry for Phong surfaces"
        logger.error(f"❌ {error_msg}")
        raise ConfigError(error_msg)
    if config.mean_extinction is None:
        error_msg = "reconstruct needs --mean-extinction for the initial guess"
        logger.error(f"❌ {error_msg}")
        raise ConfigError(error_msg)
    gt_images = load_gt_images(config.gt_dir, scene)

    inverse = InverseService(
        workers=config.workers,
        compat=config.compat_gradient,
        self_normalize=config.self_normalize,
        sort_secondary=config.sort_secondary,
    )
    base = SceneService.scene_params(scene)
    if config.carve:
        _, values = InverseService.space_carve(
            scene,
            [InverseService.downsample(image, d.rows, d.cols) for image, d in zip(gt_images, scene.detectors)],
            mean_extinction=config.mean_extinction,
        )
    else:
        values = [config.mean_extinction] * scene.grid.n_voxels
    initial = GradientService.with_unknowns(scene, base, values)

    truth = None
    if config.truth is not None:
        truth = GridIOService.load_grid(config.truth).values

    detector = scene.detectors[0]
    result = inverse.reconstruct(
        scene, gt_images, config.adam, config.schedule(detector.rows, detector.cols), config.seed,
        initial=initial, truth=truth, out_dir=config.out,
        checkpoint_every=config.checkpoint_every, max_bounces=config.max_bounces,
    )
    field = VoxelGridField.filled(scene.grid, 0.0).with_values(result.m)
    GridIOService.save_grid(config.out / "estimate.vgrd", field)
    extra = {
        "sampling_phases": result.sampling_phases,
        "stage_changes": result.stage_changes,
        "iterations_per_second": result.iterations_per_second,
        "final_loss": result.loss_history[-1],
    }
    if truth is not None:
        extra["eps"], extra["delta"] = InverseService.metrics(result.m, truth)
        logger.info(f"📊 eps={extra['eps']:.4f} delta={extra['delta']:.4f}")
    OutputService.write_manifest(config.out, config.model_dump(mode="json"), extra)
