import math
from dataclasses import dataclass, field
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from pfcm.core.schema import ImageTensor

ImageRole = Literal['clean', 'noisy', 'denoised', 'diff']


class PhantomSpec(BaseModel):
    """Random-ellipse phantom family standing in for normal-dose images."""

    model_config = ConfigDict(frozen=True)

    n: int = Field(default=64, ge=8)
    n_ellipses_range: tuple[int, int] = (3, 6)
    intensity_range: tuple[float, float] = (0.4, 0.9)
    background: float = Field(default=0.2, ge=0, le=1)

    @model_validator(mode='after')
    def check_ranges(self):
        if self.n & (self.n - 1):
            raise ValueError('n must be a power of two')
        lo, hi = self.n_ellipses_range
        if lo < 0 or hi < lo:
            raise ValueError('invalid n_ellipses_range')
        i_lo, i_hi = self.intensity_range
        if not 0 <= i_lo <= i_hi <= 1:
            raise ValueError('intensity_range must lie within [0, 1]')
        return self


class DoseModel(BaseModel):
    """Correlated additive noise; std scales as 1/sqrt(dose_factor)."""

    model_config = ConfigDict(frozen=True)

    # inf means no dose reduction, i.e. std 0
    dose_factor: float = Field(default=0.25, gt=0)
    texture_kernel_width: float = Field(default=1.0, gt=0)
    reference_std: float = Field(default=0.025, ge=0)

    @property
    def noise_std(self) -> float:
        if math.isinf(self.dose_factor):
            return 0.0
        return self.reference_std / math.sqrt(self.dose_factor)


class SampleMeta(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int
    dose_factor: float | None = None
    transform_id: int = Field(default=0, ge=0, le=7)
    offset: tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class PairedSample:
    clean: ImageTensor
    noisy: ImageTensor
    meta: SampleMeta = field(default_factory=lambda: SampleMeta(seed=0))

    def __post_init__(self):
        if self.clean.shape != self.noisy.shape:
            raise ValueError(
                f'clean {tuple(self.clean.shape)} and noisy '
                f'{tuple(self.noisy.shape)} differ in shape'
            )


class ImageSidecar(BaseModel):
    """JSON sidecar stored next to each raw little-endian float32 image."""

    n: int
    role: ImageRole
    seed: int | None = None
    dose_factor: float | None = None
    transform_id: int = 0
    pair_id: str


class PairEntry(BaseModel):
    pair_id: str
    clean: str
    noisy: str


class DatasetManifest(BaseModel):
    n: int
    count: int
    spec: PhantomSpec
    dose: DoseModel
    pairs: list[PairEntry]
