import argparse
import json
import logging

from pathrec.cli.common import add_scene_flags, emit_images, run_config
from pathrec.models.config import Command, RunConfig, RuntimeSettings
from pathrec.services.output_service import OutputService
from pathrec.services.pathstore_service import PathStoreService
from pathrec.services.scene_service import SceneService
from pathrec.services.transport_service import TransportService

logger = logging.getLogger(__name__)


def register(subparsers, settings: RuntimeSettings) -> None:
    parser = subparsers.add_parser("render", help="render every detector of a scene")
    add_scene_flags(parser)
    parser.add_argument("--store-dump", type=str, default=None, help="write the sampled paths to this file")
    parser.add_argument("--preview", action="store_true", help="also write tone-mapped PGM previews")
    parser.set_defaults(handler=lambda args: execute(_config(args, settings)))


def _config(args: argparse.Namespace, settings: RuntimeSettings) -> RunConfig:
    return run_config(args, Command.render, settings, store_dump=args.store_dump, preview=args.preview)


def execute(config: RunConfig) -> None:
    """Render images, write store statistics and the run manifest"""
    scene = SceneService.load_scene(config.scene)
    transport = TransportService(workers=config.workers)
    logger.info(f"🔄 Rendering {len(scene.detectors)} detector(s) with N={config.n_paths}, seed={config.seed}")
    output, store = transport.render(scene, None, config.n_paths, config.seed, config.max_bounces)
    config.out.mkdir(parents=True, exist_ok=True)
    emit_images(config.out, output.images, preview=config.preview)

    stats = store.stats()
    (config.out / "store_stats.json").write_text(json.dumps(stats.model_dump(), indent=2))
    if output.clamp_events:
        logger.warning(f"⚠️  {output.clamp_events} exponent clamp events during evaluation")
    if config.store_dump is not None:
        PathStoreService.dump(store, config.store_dump)
    OutputService.write_manifest(config.out, config.model_dump(mode="json"), {"store": stats.model_dump()})
