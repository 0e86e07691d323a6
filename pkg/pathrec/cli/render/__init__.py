from pathrec.cli.render.commands import register

__all__ = ["register"]
