from typing import Literal, Protocol

import torch
from pydantic import BaseModel, ConfigDict, Field

from pfcm.core.schema import RunConfig


class Metric(Protocol):
    """Per-sample distance between two image batches, shape (B,)."""

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor: ...


class DistillConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    run: RunConfig = RunConfig()
    mu: float = Field(default=0.95, ge=0, le=1)
    lr: float = Field(default=1e-5, gt=0)
    metric: str = 'pseudo_huber'
    weighting: Literal['constant'] = 'constant'
    # every how many iterations the consistency gap is measured, 0 = never
    gap_every: int = Field(default=0, ge=0)

    @property
    def D(self) -> float:
        return self.run.d

    @property
    def n_steps(self) -> int:
        return self.run.n_steps


class LossRecord(BaseModel):
    iteration: int
    loss: float
    lr: float
    wallclock: float
    consistency_gap: float | None = None

