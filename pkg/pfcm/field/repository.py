import hashlib
import json
import logging
import pickle
from pathlib import Path

import torch

from pfcm.exceptions import ArtifactIOError, MetadataMismatchError
from pfcm.field.schema import DenoiserMeta, Stage
from pfcm.field.service import Denoiser, build_denoiser

logger = logging.getLogger(__name__)

# fields a checkpoint must agree on with the run that loads it
COMPATIBILITY_FIELDS = (
    'D', 'sigma_min', 'sigma_max', 'rho', 'n_steps', 'sigma_data',
    'conditioning', 'schedule_hash',
)


def meta_to_json(meta: DenoiserMeta) -> str:
    return json.dumps(meta.model_dump(), sort_keys=True)


def meta_from_json(text: str) -> DenoiserMeta:
    return DenoiserMeta.model_validate(json.loads(text))


def _digest(meta_json: str, state_dict: dict) -> str:
    digest = hashlib.sha256(meta_json.encode())
    for name, tensor in state_dict.items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def state_digest(model: Denoiser) -> str:
    """sha256 over the metadata and every tensor of the state dict."""
    return _digest(meta_to_json(model.meta), model.net.state_dict())


def checkpoint_digest(path: Path) -> str:
    """Content digest of a saved checkpoint, equal to its state_digest."""
    blob = _read(Path(path), 'cpu')
    return _digest(blob['meta'], blob['state_dict'])


def save_checkpoint(path: Path, model: Denoiser) -> str:
    """Writes weights and JSON metadata; returns the state digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            'meta': meta_to_json(model.meta),
            'state_dict': model.net.state_dict(),
        },
        path,
    )
    digest = state_digest(model)
    logger.info('checkpoint %s stage=%s', path, model.meta.stage)
    return digest


def _read(path: Path, device: str) -> dict:
    try:
        blob = torch.load(path, map_location=device, weights_only=True)
    except FileNotFoundError as e:
        raise ArtifactIOError(f'missing checkpoint {path}') from e
    except (RuntimeError, ValueError, EOFError, pickle.UnpicklingError) as e:
        raise ArtifactIOError(f'unreadable checkpoint {path}: {e}') from e
    if not isinstance(blob, dict) or {'meta', 'state_dict'} - set(blob):
        raise ArtifactIOError(f'{path} is not a denoiser checkpoint')
    return blob


def check_compatible(
    meta: DenoiserMeta, expected: DenoiserMeta | None
) -> None:
    if expected is None:
        return
    mismatched = [
        field
        for field in COMPATIBILITY_FIELDS
        if getattr(meta, field) != getattr(expected, field)
    ]
    if mismatched:
        raise MetadataMismatchError(
            'checkpoint metadata differs in ' + ', '.join(mismatched)
        )


def load_checkpoint(
    path: Path,
    stage: Stage | None = None,
    expected: DenoiserMeta | None = None,
    device: str = 'cpu',
) -> Denoiser:
    """Rebuilds a denoiser from :func:`save_checkpoint` output.

    Raises:
        ArtifactIOError: missing or unreadable file
        MetadataMismatchError: wrong stage or incompatible metadata
    """
    path = Path(path)
    blob = _read(path, device)
    try:
        meta = meta_from_json(blob['meta'])
    except ValueError as e:
        raise ArtifactIOError(f'unreadable checkpoint {path}: {e}') from e

    if stage is not None and meta.stage != stage:
        raise MetadataMismatchError(
            f'{path} holds a {meta.stage} model, expected {stage}'
        )
    check_compatible(meta, expected)

    model = build_denoiser(meta)
    model.net.load_state_dict(blob['state_dict'])
    return model.to(device)
