import logging
import math
import random
from collections.abc import Mapping
from pathlib import Path

import numpy as np
import torch
from dotenv import dotenv_values
from pydantic import ValidationError

from pfcm.core.schema import NoiseSchedule, RunConfig
from pfcm.exceptions import ArtifactIOError, MetadataMismatchError
from pfcm.settings import Settings

logger = logging.getLogger(__name__)

Seed = int | np.random.Generator


def build_schedule(
    sigma_min: float, sigma_max: float, rho: float, n_steps: int
) -> NoiseSchedule:
    """Builds the rho-warped power grid from sigma_max down to sigma_min.

    sigma(u) = (hi + u (lo - hi))^rho with hi = sigma_max^(1/rho),
    lo = sigma_min^(1/rho) and u evenly spaced on [0, 1]. The endpoints
    are pinned exactly.

    Raises:
        ValueError: non-positive or non-monotone inputs
    """
    if sigma_min <= 0 or sigma_max <= 0:
        raise ValueError('sigma_min and sigma_max must be positive')
    if sigma_min >= sigma_max:
        raise ValueError('sigma_min must be smaller than sigma_max')
    if rho <= 0:
        raise ValueError('rho must be positive')
    if n_steps < 2:
        raise ValueError('n_steps must be at least 2')

    u = np.arange(n_steps, dtype=np.float64) / (n_steps - 1)
    lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
    sigmas = (hi + u * (lo - hi)) ** rho
    sigmas[0], sigmas[-1] = sigma_max, sigma_min

    return NoiseSchedule(
        sigma_min=sigma_min,
        sigma_max=sigma_max,
        rho=rho,
        n_steps=n_steps,
        sigmas=tuple(float(s) for s in sigmas),
    )


def index_to_sigma(sched: NoiseSchedule, i: int) -> float:
    """Returns sigmas[i] (1-based, descending: i = 1 is sigma_max)."""
    if not 1 <= i <= sched.n_steps:
        raise ValueError(f'index {i} outside [1, {sched.n_steps}]')
    return sched.sigmas[i - 1]


def schedule_from_config(config: RunConfig) -> NoiseSchedule:
    return build_schedule(
        config.sigma_min, config.sigma_max, config.rho, config.n_steps
    )


def derive_seed(seed: int, *keys: int) -> int:
    """Independent child seed for the stream identified by ``keys``."""
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=keys)
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> 1)


def make_rng(seed: Seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def load_run_config(
    path: Path | None = None,
    overrides: Mapping[str, object] | None = None,
    settings: Settings | None = None,
) -> RunConfig:
    """Merges defaults < config file < PFCM_* environment < flags.

    Raises:
        ArtifactIOError: missing config file
        MetadataMismatchError: unknown keys or invalid values
    """
    values: dict[str, object] = {}
    if path is not None:
        if not Path(path).is_file():
            raise ArtifactIOError(f'missing config file {path}')
        file_values = dotenv_values(path)
        unknown = set(file_values) - set(RunConfig.model_fields)
        if unknown:
            raise MetadataMismatchError(
                f'unknown config keys: {", ".join(sorted(unknown))}'
            )
        values.update(file_values)

    settings = settings or Settings()
    if settings.SEED is not None:
        values['seed'] = settings.SEED

    values.update(
        {k: v for k, v in (overrides or {}).items() if v is not None}
    )
    return validate_run_config(values)


def validate_run_config(values: Mapping[str, object]) -> RunConfig:
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        raise MetadataMismatchError(f'invalid configuration: {e}') from e


def format_value(value: object) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return 'inf'
        return f'{value:.17g}'
    return str(value)


def dump_run_config(config: RunConfig, path: Path) -> None:
    lines = [
        f'{key}={format_value(value)}'
        for key, value in config.model_dump().items()
    ]
    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')
