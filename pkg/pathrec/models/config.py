import os
from enum import Enum
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from pathrec.models.inverse import AdamConfig, Schedule, Stage


class Command(str, Enum):
    render = "render"
    reconstruct = "reconstruct"
    reflectometry = "reflectometry"
    metrics = "metrics"
    selftest = "selftest"


class RuntimeSettings(BaseModel):
    """Process-wide knobs read from the environment (after load_dotenv)"""
    model_config = ConfigDict(frozen=True)

    workers: int = Field(default=1, ge=1)
    log_level: str = "INFO"
    debug: bool = False
    output_dir: str = "out"
    checkpoint_every: int = Field(default=10, ge=0)

    @classmethod
    def from_env(cls) -> "RuntimeSettings":
        return cls(
            workers=int(os.getenv("PATHREC_WORKERS") or os.cpu_count() or 1),
            log_level=os.getenv("PATHREC_LOG_LEVEL", "INFO").upper(),
            debug=os.getenv("PATHREC_DEBUG", "0").lower() in ("1", "true", "yes"),
            output_dir=os.getenv("PATHREC_OUTPUT_DIR", "out"),
            checkpoint_every=int(os.getenv("PATHREC_CHECKPOINT_EVERY", "10")),
        )


class RunConfig(BaseModel):
    """One CLI invocation, flags merged with RuntimeSettings fallbacks"""
    model_config = ConfigDict(frozen=True)

    command: Command
    scene: Optional[Path] = None
    gt_dir: Optional[Path] = None
    out: Path = Path("out")
    seed: int = Field(default=0, ge=0)
    workers: int = Field(default=1, ge=1)
    n_paths: int = Field(default=100_000, ge=1)
    max_bounces: int = Field(default=500, ge=1)
    store_dump: Optional[Path] = None
    preview: bool = False
    adam: AdamConfig = Field(default_factory=AdamConfig)
    recycle_period: int = Field(default=30, ge=1)
    stages: List[Stage] = Field(default_factory=list)
    iterations: int = Field(default=200, ge=1)
    checkpoint_every: int = Field(default=10, ge=0)
    mean_extinction: Optional[float] = Field(default=None, gt=0.0)
    carve: bool = False
    self_normalize: bool = False
    sort_secondary: bool = False
    compat_gradient: bool = False
    estimate: Optional[Path] = None
    truth: Optional[Path] = None
    suite: str = "unit"

    @model_validator(mode="after")
    def _files_exist(self) -> "RunConfig":
        for name in ("scene", "gt_dir", "estimate", "truth"):
            path = getattr(self, name)
            if path is not None and not path.exists():
                raise ValueError(f"{name} path does not exist: {path}")
        if self.command in (Command.render, Command.reconstruct, Command.reflectometry) and self.scene is None:
            raise ValueError(f"{self.command.value} needs --scene")
        if self.command in (Command.reconstruct, Command.reflectometry) and self.gt_dir is None:
            raise ValueError(f"{self.command.value} needs --gt-dir")
        if self.command == Command.metrics and (self.estimate is None or self.truth is None):
            raise ValueError("metrics needs --est and --true")
        return self

    def schedule(self, rows: int, cols: int) -> Schedule:
        stages = self.stages or [Stage(rows=rows, cols=cols, n_paths=self.n_paths)]
        return Schedule(recycle_period=self.recycle_period, stages=stages, max_iterations=self.iterations)
