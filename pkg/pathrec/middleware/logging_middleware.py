import argparse
import logging
import time
from typing import Callable

from pydantic import ValidationError

from pathrec.models.errors import ConfigError, NumericAbort

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class LoggingMiddleware:
    """Wraps a command handler: logs entry, timing and status, maps errors to exit codes"""

    def __init__(self, command: str, handler: Callable[[argparse.Namespace], None]):
        self.command = command
        self.handler = handler

    def __call__(self, args: argparse.Namespace) -> int:
        start_time = time.time()
        logger.info(f"▶️  {self.command}")
        for key, value in sorted(vars(args).items()):
            if key not in ("handler", "command") and value not in (None, False):
                logger.debug(f"   {key}: {value}")

        try:
            self.handler(args)
            code = EXIT_OK
        except (ConfigError, ValidationError, FileNotFoundError) as e:
            code = EXIT_CONFIG
            logger.error(f"❌ {self.command} - configuration error: {str(e)}")
        except NumericAbort as e:
            code = EXIT_NUMERIC
            logger.error(f"❌ {self.command} - numeric abort: {str(e)}")
        except Exception as e:
            code = EXIT_FAILURE
            process_time = time.time() - start_time
            logger.error(f"💥 {self.command} - Exception after {process_time:.3f}s")
            logger.error(f"   Exception Type: {type(e).__name__}")
            logger.error(f"   Exception Message: {str(e)}")
            logger.exception("   Full Stack Trace:")

        process_time = time.time() - start_time
        if code == EXIT_OK:
            logger.info(f"✅ {self.command} - exit {code} - Time: {process_time:.3f}s")
        else:
            logger.error(f"❌ {self.command} - exit {code} - Time: {process_time:.3f}s")
        return code
