import argparse
import json
import logging

import numpy as np

from pathrec.cli.common import add_optimizer_flags, add_scene_flags, load_gt_images, run_config
from pathrec.models.config import Command, RunConfig, RuntimeSettings
from pathrec.models.errors import ConfigError
from pathrec.models.inverse import PHONG_ADAM
from pathrec.models.path import ProblemKind
from pathrec.services.gradient_service import GradientService
from pathrec.services.inverse_service import InverseService
from pathrec.services.output_service import OutputService
from pathrec.services.scene_service import SceneService

logger = logging.getLogger(__name__)


def register(subparsers, settings: RuntimeSettings) -> None:
    parser = subparsers.add_parser("reflectometry", help="recover Phong (kappa_s, gamma) of one surface")
    add_scene_flags(parser)
    add_optimizer_flags(parser)
    parser.add_argument("--kappa0", type=float, default=0.5, help="initial kappa_s")
    parser.add_argument("--gamma0", type=float, default=10.0, help="initial gamma")
    parser.add_argument("--true-kappa", type=float, default=None)
    parser.add_argument("--true-gamma", type=float, default=None)
    parser.add_argument(
        "--gamma-step-scale", type=float, default=PHONG_ADAM.step_scale[1], help="gamma step as a multiple of alpha"
    )
    parser.set_defaults(handler=lambda args: execute(_config(args, settings), args))


def _config(args: argparse.Namespace, settings: RuntimeSettings) -> RunConfig:
    return run_config(args, Command.reflectometry, settings)


def execute(config: RunConfig, args: argparse.Namespace) -> None:
    scene = SceneService.load_scene(config.scene)
    kind, surface = GradientService.problem(scene)
    if kind != ProblemKind.phong:
        error_msg = "reflectometry expects a Phong unknown in the scene file"
        logger.error(f"❌ {error_msg}")
        raise ConfigError(error_msg)
    gt_images = load_gt_images(config.gt_dir, scene)
    initial = SceneService.scene_params(scene).with_phong(surface, args.kappa0, args.gamma0)

    truth = None
    if args.true_kappa is not None and args.true_gamma is not None:
        truth = np.array([args.true_kappa, args.true_gamma])

    adam = config.adam
    if args.alpha is None:
        adam = adam.model_copy(update={"alpha": PHONG_ADAM.alpha})
    if adam.step_scale is None:
        adam = adam.model_copy(update={"step_scale": (1.0, args.gamma_step_scale)})

    inverse = InverseService(
        workers=config.workers, self_normalize=config.self_normalize, sort_secondary=config.sort_secondary
    )
    detector = scene.detectors[0]
    result = inverse.reconstruct(
        scene, gt_images, adam, config.schedule(detector.rows, detector.cols), config.seed,
        initial=initial, truth=truth, out_dir=config.out,
        checkpoint_every=config.checkpoint_every, max_bounces=config.max_bounces,
    )
    estimate = {"surface": surface, "kappa_s": float(result.m[0]), "gamma": float(result.m[1])}
    (config.out / "estimate.json").write_text(json.dumps(estimate, indent=2))
    logger.info(f"✅ Estimated kappa_s={estimate['kappa_s']:.4f} gamma={estimate['gamma']:.3f}")
    extra = {
        "estimate": estimate,
        "sampling_phases": result.sampling_phases,
        "iterations_per_second": result.iterations_per_second,
        "final_loss": result.loss_history[-1],
    }
    if truth is not None:
        extra["eps"], extra["delta"] = InverseService.metrics(result.m, truth)
    OutputService.write_manifest(config.out, config.model_dump(mode="json"), extra)
