import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from pathrec.cli.metrics import register as register_metrics
from pathrec.cli.reconstruct import register as register_reconstruct
from pathrec.cli.reflectometry import register as register_reflectometry
from pathrec.cli.render import register as register_render
from pathrec.cli.selftest import register as register_selftest
from pathrec.middleware.logging_middleware import LoggingMiddleware
from pathrec.models.config import RuntimeSettings

logger = logging.getLogger(__name__)

ENV_KEYS = ["PATHREC_WORKERS", "PATHREC_LOG_LEVEL", "PATHREC_DEBUG", "PATHREC_OUTPUT_DIR", "PATHREC_CHECKPOINT_EVERY"]


def configure_logging(settings: RuntimeSettings) -> None:
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        handlers=[
            logging.StreamHandler(sys.stdout)
        ]
    )
    if settings.debug:
        logging.getLogger("pathrec").setLevel(logging.DEBUG)
        logging.getLogger("pathrec.services").setLevel(logging.DEBUG)


def load_settings() -> RuntimeSettings:
    load_dotenv()
    settings = RuntimeSettings.from_env()
    configure_logging(settings)
    logger.info("📋 Environment Variables Status:")
    for key in ENV_KEYS:
        value = os.getenv(key)
        if value:
            logger.info(f"  ✅ {key}: {value} (loaded)")
        else:
            logger.debug(f"  ⚠️  {key}: NOT SET")
    return settings


def build_parser(settings: RuntimeSettings) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pathrec", description="Differentiable path tracing and inverse rendering")
    subparsers = parser.add_subparsers(dest="command", required=True)
    register_render(subparsers, settings)
    register_reconstruct(subparsers, settings)
    register_reflectometry(subparsers, settings)
    register_metrics(subparsers, settings)
    register_selftest(subparsers, settings)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run one command and return its exit code"""
    settings = load_settings()
    parser = build_parser(settings)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on unknown flags and 0 on --help
        return int(e.code or 0)
    return LoggingMiddleware(args.command, args.handler)(args)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
