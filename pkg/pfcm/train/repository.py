import logging
from pathlib import Path

import pandas as pd
import torch

from pfcm.exceptions import ArtifactIOError
from pfcm.field.repository import save_checkpoint
from pfcm.field.service import Denoiser
from pfcm.train.schema import LossRecord

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ['iteration', 'loss', 'lr', 'wallclock', 'consistency_gap']


def checkpoint_path(out_dir: Path, stage: str, iteration: int) -> Path:
    return Path(out_dir) / 'checkpoints' / f'{stage}_{iteration:07d}.pt'


def final_checkpoint_path(out_dir: Path, stage: str) -> Path:
    return Path(out_dir) / f'{stage}.pt'


def write_loss_trace(path: Path, records: list[LossRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [record.model_dump() for record in records], columns=TRACE_COLUMNS
    )
    frame.to_csv(path, index=False, float_format='%.9g')
    return path


def read_loss_trace(path: Path) -> list[LossRecord]:
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError as e:
        raise ArtifactIOError(f'missing loss trace {path}') from e
    frame = frame.astype(object).where(frame.notna(), None)
    return [LossRecord(**row) for row in frame.to_dict('records')]


def save_training_state(
    path: Path,
    model: Denoiser,
    optimizer: torch.optim.Optimizer,
    iteration: int,
    trace: list[LossRecord],
    target: Denoiser | None = None,
) -> Path:
    """Checkpoint plus the optimizer, target network and RNG state blob."""
    path = Path(path)
    save_checkpoint(path, model)
    state = {
        'iteration': iteration,
        'optimizer': optimizer.state_dict(),
        'rng': torch.get_rng_state(),
        'trace': [record.model_dump() for record in trace],
    }
    if target is not None:
        state['target'] = target.net.state_dict()
    torch.save(state, path.with_suffix('.state'))
    return path


def load_training_state(path: Path) -> dict:
    state_path = Path(path).with_suffix('.state')
    try:
        state = torch.load(state_path, weights_only=True)
    except FileNotFoundError as e:
        raise ArtifactIOError(f'missing training state {state_path}') from e
    state['trace'] = [LossRecord(**row) for row in state['trace']]
    return state
