import argparse
import logging
from pathlib import Path

from pathrec.cli.common import run_config
from pathrec.models.config import Command, RunConfig, RuntimeSettings
from pathrec.models.errors import ConfigError
from pathrec.services.grid_io_service import GridIOService
from pathrec.services.inverse_service import InverseService

logger = logging.getLogger(__name__)


def register(subparsers, settings: RuntimeSettings) -> None:
    parser = subparsers.add_parser("metrics", help="eps / delta between an estimated and a true grid")
    parser.add_argument("--est", dest="estimate", type=Path, required=True)
    parser.add_argument("--true", dest="truth", type=Path, required=True)
    parser.set_defaults(handler=lambda args: execute(_config(args, settings)))


def _config(args: argparse.Namespace, settings: RuntimeSettings) -> RunConfig:
    return run_config(args, Command.metrics, settings, estimate=args.estimate, truth=args.truth)


def execute(config: RunConfig) -> None:
    estimate = GridIOService.load_grid(config.estimate)
    truth = GridIOService.load_grid(config.truth)
    if not estimate.geometry.same_layout(truth.geometry):
        error_msg = f"Grids {config.estimate} and {config.truth} do not share a layout"
        logger.error(f"❌ {error_msg}")
        raise ConfigError(error_msg)
    eps, delta = InverseService.metrics(estimate.values, truth.values)
    print(f"eps={eps:g} delta={delta:g}")
