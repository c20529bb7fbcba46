import hashlib
import json
import math

import torch
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    field_validator,
    model_validator,
)

# An n x n float tensor of normalized intensities. Plays the clean image x,
# the low-dose image y, perturbed states x_sigma and denoised outputs.
ImageTensor = torch.Tensor

MIN_RESOLUTION = 8


def validate_image(x: ImageTensor, name: str = 'image') -> ImageTensor:
    """Checks the n x n, power-of-two, finite invariants of an image."""
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f'{name} must be square n x n, got {tuple(x.shape)}')
    n = x.shape[0]
    if n < MIN_RESOLUTION or n & (n - 1):
        raise ValueError(f'{name} resolution {n} is not a power of two >= 8')
    if not torch.isfinite(x).all():
        raise ValueError(f'{name} contains non-finite values')
    return x


class NoiseSchedule(BaseModel):
    """Discretized noise levels, stored descending (index 1 = sigma_max)."""

    model_config = ConfigDict(frozen=True)

    sigma_min: float = Field(gt=0)
    sigma_max: float = Field(gt=0)
    rho: float = Field(gt=0)
    n_steps: int = Field(ge=2)
    sigmas: tuple[float, ...]

    @model_validator(mode='after')
    def check_grid(self):
        if len(self.sigmas) != self.n_steps:
            raise ValueError('sigmas length differs from n_steps')
        if self.sigmas[0] != self.sigma_max:
            raise ValueError('first sigma must equal sigma_max')
        if self.sigmas[-1] != self.sigma_min:
            raise ValueError('last sigma must equal sigma_min')
        if any(a <= b for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ValueError('sigmas must be strictly decreasing')
        return self

    def ascending(self, i: int) -> float:
        """sigma_i of the ascending grid sigma_1 = sigma_min < ... ."""
        if not 1 <= i <= self.n_steps:
            raise ValueError(f'index {i} outside [1, {self.n_steps}]')
        return self.sigmas[self.n_steps - i]

    def digest(self) -> str:
        payload = json.dumps(
            [self.sigma_min, self.sigma_max, self.rho, self.n_steps],
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


class RunConfig(BaseModel):
    """Flat run configuration; keys match the config file keys."""

    model_config = ConfigDict(extra='forbid', frozen=True)

    d: float = 128.0
    sigma_min: float = Field(default=0.002, gt=0)
    sigma_max: float = Field(default=380.0, gt=0)
    rho: float = Field(default=7.0, gt=0)
    n_steps: int = Field(default=40, ge=2)
    sigma_data: float = Field(default=0.5, gt=0)
    seed: int = 0
    lr: float = Field(default=1e-4, gt=0)
    iters: int = Field(default=20_000, ge=0)
    batch: int = Field(default=4, ge=1)
    dropout: float = Field(default=0.1, ge=0, lt=1)
    patch: int = Field(default=32, ge=8)
    width: int = Field(default=32, ge=4)
    levels: int = Field(default=2, ge=1)
    optimizer: str = 'radam'
    loss_weighting: str = 'drift'
    conditioning: str = 'concat'
    checkpoint_every: int = Field(default=1000, ge=1)

    @field_validator('d')
    @classmethod
    def check_d(cls, value: float) -> float:
        # inf selects the Gaussian (diffusion) limit
        if math.isnan(value) or value <= 2:
            raise ValueError('D must be > 2')
        return value

    @field_validator('optimizer')
    @classmethod
    def check_optimizer(cls, value: str) -> str:
        if value not in {'radam', 'adam'}:
            raise ValueError(f'unknown optimizer {value!r}')
        return value

    @field_validator('loss_weighting')
    @classmethod
    def check_weighting(cls, value: str) -> str:
        if value not in {'drift', 'edm'}:
            raise ValueError(f'unknown loss weighting {value!r}')
        return value

    @field_validator('conditioning')
    @classmethod
    def check_conditioning(cls, value: str) -> str:
        if value not in {'concat', 'none'}:
            raise ValueError(f'unknown conditioning {value!r}')
        return value

    @model_validator(mode='after')
    def check_sigma_range(self):
        if self.sigma_min >= self.sigma_max:
            raise ValueError('sigma_min must be smaller than sigma_max')
        return self
