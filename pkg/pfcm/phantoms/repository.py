import json
from pathlib import Path

import numpy as np
import torch

from pfcm.core.schema import ImageTensor
from pfcm.exceptions import ArtifactIOError
from pfcm.phantoms.schema import (
    DatasetManifest,
    DoseModel,
    ImageSidecar,
    PairedSample,
    PairEntry,
    PhantomSpec,
    SampleMeta,
)

MANIFEST_NAME = 'manifest.json'


def save_image(path: Path, img: ImageTensor, sidecar: ImageSidecar) -> Path:
    """Writes ``<path>.f32`` (raw little-endian float32) and ``<path>.json``.

    Returns:
        Path: the payload file
    """
    path = Path(path).with_suffix('')
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = path.with_suffix('.f32')
    img.detach().cpu().numpy().astype('<f4').tofile(payload)
    path.with_suffix('.json').write_text(
        json.dumps(sidecar.model_dump(), indent=2), encoding='utf-8'
    )
    return payload


def load_sidecar(path: Path) -> ImageSidecar:
    sidecar_path = Path(path).with_suffix('.json')
    try:
        return ImageSidecar.model_validate(
            json.loads(sidecar_path.read_text(encoding='utf-8'))
        )
    except FileNotFoundError as e:
        raise ArtifactIOError(f'missing sidecar {sidecar_path}') from e


def load_image(path: Path) -> tuple[ImageTensor, ImageSidecar]:
    """Reads an image written by :func:`save_image`.

    Raises:
        ArtifactIOError: missing files or a payload of the wrong size
    """
    sidecar = load_sidecar(path)
    payload = Path(path).with_suffix('.f32')
    try:
        data = np.fromfile(payload, dtype='<f4')
    except FileNotFoundError as e:
        raise ArtifactIOError(f'missing image payload {payload}') from e
    if data.size != sidecar.n * sidecar.n:
        raise ArtifactIOError(
            f'{payload} holds {data.size} values, expected {sidecar.n}^2'
        )
    img = torch.from_numpy(data.astype(np.float32).reshape(sidecar.n, -1))
    return img, sidecar


def save_dataset(
    out_dir: Path,
    samples: list[PairedSample],
    spec: PhantomSpec,
    dose: DoseModel,
) -> Path:
    out_dir = Path(out_dir)
    entries = []
    for k, sample in enumerate(samples):
        pair_id = f'{k:05d}'
        for role, img in (('clean', sample.clean), ('noisy', sample.noisy)):
            save_image(
                out_dir / f'{pair_id}_{role}',
                img,
                ImageSidecar(
                    n=img.shape[-1],
                    role=role,
                    seed=sample.meta.seed,
                    dose_factor=sample.meta.dose_factor,
                    transform_id=sample.meta.transform_id,
                    pair_id=pair_id,
                ),
            )
        entries.append(
            PairEntry(
                pair_id=pair_id,
                clean=f'{pair_id}_clean.json',
                noisy=f'{pair_id}_noisy.json',
            )
        )

    manifest = DatasetManifest(
        n=spec.n, count=len(samples), spec=spec, dose=dose, pairs=entries
    )
    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(
        json.dumps(manifest.model_dump(), indent=2), encoding='utf-8'
    )
    return manifest_path


def load_dataset(data_dir: Path) -> list[PairedSample]:
    """Loads every pair listed in ``manifest.json``.

    Raises:
        ArtifactIOError: missing manifest or images
    """
    manifest_path = Path(data_dir) / MANIFEST_NAME
    try:
        manifest = DatasetManifest.model_validate(
            json.loads(manifest_path.read_text(encoding='utf-8'))
        )
    except FileNotFoundError as e:
        raise ArtifactIOError(
            f'missing dataset manifest {manifest_path}'
        ) from e

    samples = []
    for entry in manifest.pairs:
        clean, clean_meta = load_image(Path(data_dir) / entry.clean)
        noisy, _ = load_image(Path(data_dir) / entry.noisy)
        samples.append(
            PairedSample(
                clean=clean,
                noisy=noisy,
                meta=SampleMeta(
                    seed=clean_meta.seed or 0,
                    dose_factor=clean_meta.dose_factor,
                    transform_id=clean_meta.transform_id,
                ),
            )
        )
    return samples
