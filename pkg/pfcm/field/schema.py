from typing import Literal, NamedTuple

from pydantic import BaseModel, ConfigDict, Field

Stage = Literal['pfgmpp', 'pfcm']
PreconditioningKind = Literal['edm', 'consistency']
Conditioning = Literal['concat', 'none']


class Preconditioning(NamedTuple):
    c_skip: float
    c_out: float
    c_in: float
    c_noise: float


class ArchDescriptor(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal['unet', 'toy'] = 'unet'
    width: int = Field(default=32, ge=4)
    levels: int = Field(default=2, ge=1)
    dropout: float = Field(default=0.0, ge=0, lt=1)


class DenoiserMeta(BaseModel):
    """Metadata stored with every checkpoint and checked by loaders."""

    model_config = ConfigDict(frozen=True)

    D: float
    sigma_min: float
    sigma_max: float
    rho: float
    n_steps: int
    sigma_data: float
    conditioning: Conditioning = 'concat'
    arch: ArchDescriptor = ArchDescriptor()
    stage: Stage
    preconditioning: PreconditioningKind
    schedule_hash: str
