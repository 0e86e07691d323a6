import argparse
import logging

from pathrec.cli.common import run_config
from pathrec.models.config import Command, RunConfig, RuntimeSettings
from pathrec.models.errors import PathrecError
from pathrec.services.output_service import OutputService
from pathrec.services.selftest_service import SelftestService

logger = logging.getLogger(__name__)


def register(subparsers, settings: RuntimeSettings) -> None:
    parser = subparsers.add_parser("selftest", help="run the built-in desk-scale checks")
    parser.add_argument("--suite", choices=["unit", "acceptance"], default="unit")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("-o", "--out", type=str, default=None)
    parser.set_defaults(handler=lambda args: execute(_config(args, settings)))


def _config(args: argparse.Namespace, settings: RuntimeSettings) -> RunConfig:
    return run_config(args, Command.selftest, settings, suite=args.suite)


def execute(config: RunConfig) -> None:
    results = SelftestService(workers=config.workers, seed=config.seed).run(config.suite)
    OutputService.write_manifest(
        config.out, config.model_dump(mode="json"), {"checks": [r.model_dump() for r in results]}
    )
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise PathrecError(f"{len(failed)} check(s) failed: {', '.join(failed)}")
    logger.info(f"✅ All {len(results)} checks passed")
