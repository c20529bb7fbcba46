from dataclasses import dataclass, field
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from pfcm.core.schema import ImageTensor, NoiseSchedule
from pfcm.core.service import index_to_sigma
from pfcm.exceptions import UsageError

SamplerName = Literal['vanilla', 'task', 'heun', 'hijack', 'reg', 'input']


class TaskSamplerConfig(BaseModel):
    """Hijack level (as a schedule index or a sigma) and mixing weight w.

    The level may be left unset for samplers that only mix, such as reg.
    """

    model_config = ConfigDict(frozen=True)

    hijack_index: int | None = Field(default=None, ge=1)
    sigma_hat: float | None = Field(default=None, gt=0)
    w: float = Field(default=1.0, ge=0, le=1)

    @model_validator(mode='after')
    def check_level(self):
        if self.hijack_index is not None and self.sigma_hat is not None:
            raise ValueError('give at most one of hijack_index and sigma_hat')
        return self

    def resolve_sigma(self, sched: NoiseSchedule) -> float:
        if self.hijack_index is None and self.sigma_hat is None:
            raise UsageError('no hijack level: set hijack_index or sigma_hat')
        if self.hijack_index is not None:
            return index_to_sigma(sched, self.hijack_index)
        if not sched.sigma_min <= self.sigma_hat <= sched.sigma_max:
            raise ValueError(
                f'sigma_hat {self.sigma_hat} outside '
                f'[{sched.sigma_min}, {sched.sigma_max}]'
            )
        return self.sigma_hat


@dataclass
class SampleReport:
    output: ImageTensor
    nfe: int
    sampler: SamplerName
    config: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {'nfe': self.nfe, 'sampler': self.sampler, **self.config}
