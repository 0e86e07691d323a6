from pathrec.cli.selftest.commands import register

__all__ = ["register"]
