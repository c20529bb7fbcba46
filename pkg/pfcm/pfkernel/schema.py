from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel


@dataclass(frozen=True)
class AugmentedNoiseDraw:
    """Radius R = ||x_sigma - x||, unit direction v and augmented norm r.

    Arrays carry a leading batch shape when several draws are made at once;
    ``v`` has the flattened image dimension N as its last axis.
    """

    R: np.ndarray
    v: np.ndarray
    r: np.ndarray
    D: float

    @property
    def noise(self) -> np.ndarray:
        return np.asarray(self.R)[..., None] * self.v


class CdfTableHeader(BaseModel):
    r: float
    N: int
    D: float
    n_points: int
    dtype: str = 'float64'
