import argparse
import logging
from pathlib import Path
from typing import List

import numpy as np

from pathrec.models.config import Command, RunConfig, RuntimeSettings
from pathrec.models.errors import ConfigError
from pathrec.models.inverse import AdamConfig, Schedule
from pathrec.models.scene import Scene
from pathrec.services.output_service import OutputService

logger = logging.getLogger(__name__)

IMAGE_NAME = "image_{k}.pfm"


def add_scene_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scene", type=Path, help="scene JSON file")
    parser.add_argument("--paths", type=float, default=None, help="number of sampled paths N")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=None, help="worker threads (default: PATHREC_WORKERS)")
    parser.add_argument("--max-bounces", type=int, default=500)
    parser.add_argument("-o", "--out", type=Path, default=None, help="output directory (default: PATHREC_OUTPUT_DIR)")


def add_optimizer_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--gt-dir", type=Path, help="directory holding image_<k>.pfm per detector")
    parser.add_argument("--recycle-period", type=int, default=30, help="iterations between resamples (N_r)")
    parser.add_argument("--stages", type=str, default=None, help="e.g. 30x30:1000000,60x60:5000000")
    parser.add_argument("--alpha", type=float, default=None, help="ADAM step size")
    parser.add_argument("--iterations", type=int, default=200)
    parser.add_argument("--self-normalize", action="store_true")
    parser.add_argument("--sort-secondary", action="store_true", help="tie-break the size sort by first voxel")


def run_config(args: argparse.Namespace, command: Command, settings: RuntimeSettings, **extra) -> RunConfig:
    """RunConfig from parsed flags, falling back to the environment settings"""
    fields = {
        "command": command,
        "scene": getattr(args, "scene", None),
        "seed": getattr(args, "seed", 0),
        "workers": getattr(args, "workers", None) or settings.workers,
        "out": getattr(args, "out", None) or Path(settings.output_dir),
        "max_bounces": getattr(args, "max_bounces", 500),
        "checkpoint_every": settings.checkpoint_every,
    }
    if getattr(args, "paths", None) is not None:
        fields["n_paths"] = int(args.paths)
    if getattr(args, "gt_dir", None) is not None:
        fields["gt_dir"] = args.gt_dir
    if hasattr(args, "recycle_period"):
        fields["recycle_period"] = args.recycle_period
        fields["iterations"] = args.iterations
        fields["self_normalize"] = args.self_normalize
        fields["sort_secondary"] = args.sort_secondary
        if args.stages:
            fields["stages"] = Schedule.parse_stages(args.stages)
        if args.alpha is not None:
            fields["adam"] = AdamConfig(alpha=args.alpha)
    fields.update({k: v for k, v in extra.items() if v is not None})
    config = RunConfig(**fields)
    logger.debug(f"   Run config: {config.model_dump(mode='json')}")
    return config


def load_gt_images(gt_dir: Path, scene: Scene) -> List[np.ndarray]:
    images = []
    for k, detector in enumerate(scene.detectors):
        image = OutputService.load_image(gt_dir / IMAGE_NAME.format(k=k))
        if image.shape[0] % detector.rows or image.shape[1] % detector.cols:
            error_msg = (
                f"Ground truth {k} is {image.shape[0]}x{image.shape[1]}, "
                f"not a multiple of the detector's {detector.rows}x{detector.cols}"
            )
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        images.append(image)
    logger.info(f"📂 Loaded {len(images)} ground-truth images from {gt_dir}")
    return images


def emit_images(out_dir: Path, images: List[np.ndarray], preview: bool = False) -> None:
    for k, image in enumerate(images):
        OutputService.emit_image(out_dir / IMAGE_NAME.format(k=k), image)
        if preview:
            OutputService.emit_preview(out_dir / f"image_{k}.pgm", image)
    logger.info(f"💾 Wrote {len(images)} images to {out_dir}")
