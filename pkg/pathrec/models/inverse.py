from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from pathrec.models.scene import SceneParams


class AdamConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(default=1e7, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, gt=0.0)
    project: bool = True
    # per-unknown multipliers of alpha, for unknowns on different scales (kappa_s vs gamma)
    step_scale: Optional[Tuple[float, ...]] = None

    @field_validator("step_scale")
    @classmethod
    def _positive_scale(cls, scale: Optional[Tuple[float, ...]]) -> Optional[Tuple[float, ...]]:
        if scale is not None and (not scale or min(scale) <= 0.0):
            raise ValueError(f"step scale {scale} must be non-empty and positive")
        return scale


# gamma steps 100x wider than kappa_s
PHONG_ADAM = AdamConfig(alpha=0.01, step_scale=(1.0, 100.0))


class Stage(BaseModel):
    """Image resolution and path count of one coarse-to-fine stage"""
    model_config = ConfigDict(frozen=True)

    rows: int = Field(ge=1)
    cols: int = Field(ge=1)
    n_paths: int = Field(ge=1)

    @classmethod
    def parse(cls, text: str) -> "Stage":
        """'30x30:1000000' -> Stage(rows=30, cols=30, n_paths=1000000)"""
        resolution, _, paths = text.strip().partition(":")
        rows, _, cols = resolution.partition("x")
        return cls(rows=int(rows), cols=int(cols), n_paths=int(float(paths)))


class Schedule(BaseModel):
    model_config = ConfigDict(frozen=True)

    recycle_period: int = Field(default=30, ge=1)
    stages: List[Stage]
    max_iterations: int = Field(default=200, ge=1)
    saturation_threshold: float = Field(default=0.01, ge=0.0)
    saturation_window: int = Field(default=20, ge=1)

    @field_validator("stages")
    @classmethod
    def _non_decreasing(cls, stages: List[Stage]) -> List[Stage]:
        if not stages:
            raise ValueError("schedule needs at least one stage")
        for prev, cur in zip(stages, stages[1:]):
            if cur.rows < prev.rows or cur.cols < prev.cols or cur.n_paths < prev.n_paths:
                raise ValueError(f"stage {cur} is coarser than the stage before it ({prev})")
        return stages

    @classmethod
    def parse_stages(cls, text: str) -> List[Stage]:
        return [Stage.parse(item) for item in text.split(",") if item.strip()]


class OptState(BaseModel):
    """Optimizer state carried between iterations; never shared"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    m: np.ndarray
    first_moment: np.ndarray
    second_moment: np.ndarray
    t: int = 0
    generation: int = 0
    params_ref: Optional[SceneParams] = None
    loss_history: List[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _shapes(self) -> "OptState":
        if self.first_moment.shape != self.m.shape or self.second_moment.shape != self.m.shape:
            raise ValueError(
                f"moment shapes {self.first_moment.shape}, {self.second_moment.shape} do not match {self.m.shape}"
            )
        return self

    @classmethod
    def start(cls, m: np.ndarray) -> "OptState":
        m = np.array(m, dtype=np.float64)
        return cls(m=m, first_moment=np.zeros_like(m), second_moment=np.zeros_like(m))


class IterationRecord(BaseModel):
    iteration: int
    time_s: float
    loss: float
    eps: Optional[float] = None
    delta: Optional[float] = None
    stage: int = 0
    phase: int = 0
    resampled: bool = False

    def csv_row(self) -> Tuple:
        return (self.iteration, f"{self.time_s:.6f}", repr(self.loss), self.eps, self.delta, self.stage)

    def checkpoint_row(self) -> Tuple:
        """csv_row plus the index of the sampling phase whose paths produced it"""
        return self.csv_row() + (self.phase,)


class ReconstructionResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: SceneParams
    m: np.ndarray
    history: List[IterationRecord]
    sampling_phases: int
    stage_changes: List[int] = Field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def loss_history(self) -> List[float]:
        return [record.loss for record in self.history]

    @property
    def iterations_per_second(self) -> float:
        return len(self.history) / self.elapsed_s if self.elapsed_s > 0.0 else 0.0
