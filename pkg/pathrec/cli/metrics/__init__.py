from pathrec.cli.metrics.commands import register

__all__ = ["register"]
