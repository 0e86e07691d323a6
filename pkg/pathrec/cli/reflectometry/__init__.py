from pathrec.cli.reflectometry.commands import register

__all__ = ["register"]
