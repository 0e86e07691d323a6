from pathrec.cli.reconstruct.commands import register

__all__ = ["register"]
