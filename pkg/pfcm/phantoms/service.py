import logging

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from skimage.draw import ellipse

from pfcm.core.schema import ImageTensor, validate_image
from pfcm.core.service import Seed, derive_seed, make_rng
from pfcm.phantoms.schema import (
    DoseModel,
    PairedSample,
    PhantomSpec,
    SampleMeta,
)

logger = logging.getLogger(__name__)

N_TRANSFORMS = 8


def generate_phantom(spec: PhantomSpec, seed: Seed) -> ImageTensor:
    """Draws a random-ellipse phantom in [0, 1].

    Every ellipse is placed so that its bounding circle lies inside the
    field of view; later ellipses overwrite earlier ones.
    """
    rng = make_rng(seed)
    n = spec.n
    img = np.full((n, n), spec.background, dtype=np.float64)

    lo, hi = spec.n_ellipses_range
    count = int(rng.integers(lo, hi + 1))
    for _ in range(count):
        r_radius = rng.uniform(n / 16, n / 4)
        c_radius = rng.uniform(n / 16, n / 4)
        bound = max(r_radius, c_radius) + 1
        row = rng.uniform(bound, n - 1 - bound)
        col = rng.uniform(bound, n - 1 - bound)
        rotation = rng.uniform(-np.pi, np.pi)
        intensity = rng.uniform(*spec.intensity_range)

        rr, cc = ellipse(
            row, col, r_radius, c_radius, shape=img.shape, rotation=rotation
        )
        img[rr, cc] = intensity

    return torch.from_numpy(np.clip(img, 0.0, 1.0).astype(np.float32))


def correlated_noise(
    n: int, width: float, rng: np.random.Generator
) -> np.ndarray:
    """Stationary unit-variance noise: white noise smoothed by a Gaussian."""
    white = rng.standard_normal((n, n))
    smooth = gaussian_filter(white, sigma=width, mode='wrap')

    delta = np.zeros((n, n))
    delta[0, 0] = 1.0
    kernel = gaussian_filter(delta, sigma=width, mode='wrap')
    return smooth / np.sqrt(np.sum(kernel**2))


def degrade(x: ImageTensor, dose: DoseModel, seed: Seed) -> ImageTensor:
    """y = clip(x + eta) with eta correlated, std ~ 1/sqrt(dose_factor)."""
    validate_image(x, 'x')
    std = dose.noise_std
    if std == 0:
        return x.clone()

    rng = make_rng(seed)
    eta = std * correlated_noise(x.shape[0], dose.texture_kernel_width, rng)
    y = np.clip(x.double().numpy() + eta, 0.0, 1.0)
    return torch.from_numpy(y.astype(np.float32))


def make_pair(
    spec: PhantomSpec, dose: DoseModel, seed: int
) -> PairedSample:
    clean = generate_phantom(spec, derive_seed(seed, 0))
    noisy = degrade(clean, dose, derive_seed(seed, 1))
    return PairedSample(
        clean=clean,
        noisy=noisy,
        meta=SampleMeta(seed=seed, dose_factor=dose.dose_factor),
    )


def generate_dataset(
    spec: PhantomSpec, dose: DoseModel, count: int, seed: int
) -> list[PairedSample]:
    logger.info('generating %d phantom pairs n=%d', count, spec.n)
    return [
        make_pair(spec, dose, derive_seed(seed, k)) for k in range(count)
    ]


def extract_patch(
    x: ImageTensor,
    y: ImageTensor,
    patch_n: int,
    seed: Seed,
    offset: tuple[int, int] | None = None,
) -> PairedSample:
    """Cuts the same patch_n x patch_n window out of both images.

    Raises:
        ValueError: patch larger than the image
    """
    if x.shape != y.shape:
        raise ValueError('clean and noisy images differ in shape')
    n = x.shape[-1]
    if patch_n > n:
        raise ValueError(f'patch {patch_n} larger than image {n}')

    if offset is None:
        rng = make_rng(seed)
        top, left = (int(v) for v in rng.integers(0, n - patch_n + 1, size=2))
    else:
        top, left = offset
        if not (0 <= top <= n - patch_n and 0 <= left <= n - patch_n):
            raise ValueError(f'offset {offset} outside the image')

    window = (slice(top, top + patch_n), slice(left, left + patch_n))
    return PairedSample(
        clean=x[window].clone(),
        noisy=y[window].clone(),
        meta=SampleMeta(
            seed=seed if isinstance(seed, int) else 0,
            offset=(top, left),
        ),
    )


def apply_dihedral(img: ImageTensor, transform_id: int) -> ImageTensor:
    """Element of the dihedral group of the square: ids 4..7 are mirrors."""
    if not 0 <= transform_id < N_TRANSFORMS:
        raise ValueError(f'transform id {transform_id} outside [0, 7]')
    out = torch.rot90(img, transform_id % 4, dims=(-2, -1))
    if transform_id >= N_TRANSFORMS // 2:
        out = torch.flip(out, dims=(-1,))
    return out.contiguous()


def augment(
    s: PairedSample, seed: Seed, transform_id: int | None = None
) -> PairedSample:
    """Applies one random rotation/mirroring identically to the pair."""
    if s.clean.shape[-1] != s.clean.shape[-2]:
        raise ValueError('augmentation needs a square patch')
    if transform_id is None:
        transform_id = int(make_rng(seed).integers(N_TRANSFORMS))

    return PairedSample(
        clean=apply_dihedral(s.clean, transform_id),
        noisy=apply_dihedral(s.noisy, transform_id),
        meta=s.meta.model_copy(update={'transform_id': transform_id}),
    )
