"""Sampling from the PFGM++ perturbation kernel.

p_r(x_sigma | x) ~ 1 / (||x_sigma - x||^2 + r^2)^((N + D) / 2) splits into a
uniform angle and the radial law p_r(R) ~ R^(N-1) / (R^2 + r^2)^((N+D)/2).
Under B = R^2 / (R^2 + r^2) the radial law is Beta(N/2, D/2), which is how
radii are drawn. D = inf selects the Gaussian kernel of the diffusion limit.
"""

import math

import numpy as np
import torch
from scipy.special import betaln, xlogy

from pfcm.core.schema import ImageTensor
from pfcm.core.service import Seed, make_rng
from pfcm.pfkernel.schema import AugmentedNoiseDraw

MIN_D = 2.0


def _check_d(D: float) -> None:
    if math.isnan(D) or D <= MIN_D:
        raise ValueError(f'D must be > 2, got {D}')


def align_r(sigma: float, D: float) -> float:
    """r = sigma * sqrt(D)."""
    if sigma < 0 or D <= 0:
        raise ValueError('sigma must be >= 0 and D > 0')
    if sigma == 0:
        return 0.0
    return sigma * math.sqrt(D)


def sample_radius(
    r: float | np.ndarray,
    N: int,
    D: float,
    seed: Seed,
    size: tuple[int, ...] | int | None = None,
) -> float | np.ndarray:
    """Draws R ~ p_r(R) as r * sqrt(B / (1 - B)), B ~ Beta(N/2, D/2)."""
    _check_d(D)
    if math.isinf(D):
        raise ValueError('the radial law needs a finite D')
    if N < 1:
        raise ValueError('N must be >= 1')
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError('r must be non-negative')

    rng = make_rng(seed)
    if size is None and r.ndim:
        size = r.shape
    b = rng.beta(N / 2, D / 2, size=size)
    R = r * np.sqrt(b / (1 - b))
    return float(R) if np.ndim(R) == 0 else R


def sample_angle(
    N: int, seed: Seed, size: tuple[int, ...] | int | None = None
) -> np.ndarray:
    """Uniform direction on the unit sphere of R^N: v = u / ||u||."""
    if N < 1:
        raise ValueError('N must be >= 1')
    rng = make_rng(seed)
    shape = (*np.atleast_1d(size).tolist(), N) if size is not None else (N,)
    u = rng.standard_normal(shape)
    return u / np.linalg.norm(u, axis=-1, keepdims=True)


def sample_perturbation(
    N: int,
    sigma: float | np.ndarray,
    D: float,
    seed: Seed,
    size: tuple[int, ...] | None = None,
) -> AugmentedNoiseDraw:
    """Radius and angle of one (or a batch of) kernel draws at ``sigma``."""
    _check_d(D)
    rng = make_rng(seed)
    sigma = np.asarray(sigma, dtype=np.float64)
    if size is not None:
        sigma = np.broadcast_to(sigma, size)

    if math.isinf(D):
        u = rng.standard_normal((*sigma.shape, N))
        R = np.linalg.norm(u, axis=-1)
        return AugmentedNoiseDraw(
            R=sigma * R,
            v=u / R[..., None],
            r=np.full(sigma.shape, np.inf),
            D=D,
        )

    r = sigma * math.sqrt(D)
    R = sample_radius(r, N, D, rng, size=sigma.shape or None)
    v = sample_angle(N, rng, size=sigma.shape or None)
    return AugmentedNoiseDraw(R=np.asarray(R), v=v, r=r, D=D)


def perturb(
    x: ImageTensor,
    sigma: float | np.ndarray | torch.Tensor,
    D: float,
    seed: Seed,
) -> ImageTensor:
    """x_sigma = x + R v with r = sigma sqrt(D).

    ``x`` is either one n x n image or a batch (..., n, n); ``sigma`` is a
    scalar or has the batch shape.
    """
    if isinstance(sigma, torch.Tensor):
        sigma = sigma.detach().cpu().double().numpy()
    batch = tuple(x.shape[:-2])
    sigma = np.asarray(sigma, dtype=np.float64)
    # per-sample sigmas of shape (B,) against images of shape (B, C, n, n)
    sigma = sigma.reshape(sigma.shape + (1,) * (len(batch) - sigma.ndim))
    N = x.shape[-1] * x.shape[-2]
    draw = sample_perturbation(N, sigma, D, seed, size=batch)
    noise = torch.from_numpy(draw.noise).reshape(x.shape)
    return x + noise.to(dtype=x.dtype, device=x.device)


def sample_prior(
    sigma_max: float,
    D: float,
    N: int,
    seed: Seed,
    size: tuple[int, ...] = (),
) -> ImageTensor:
    """Pure-noise state on the r = sigma_max sqrt(D) hyper-cylinder."""
    n = math.isqrt(N)
    if n * n != N:
        raise ValueError(f'N = {N} is not a square image size')
    draw = sample_perturbation(N, sigma_max, D, seed, size=size)
    return torch.from_numpy(draw.noise).reshape(*size, n, n).float()


def log_radius_pdf(
    R: float | np.ndarray, r: float, N: int, D: float
) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    log_norm = math.log(2) + D * math.log(r) - betaln(N / 2, D / 2)
    with np.errstate(divide='ignore'):
        return (
            log_norm
            + xlogy(N - 1, R)
            - (N + D) / 2 * np.log(R**2 + r**2)
        )


def radius_pdf(
    R: float | np.ndarray, r: float, N: int, D: float
) -> float | np.ndarray:
    """Normalized density of the perturbed radius."""
    _check_d(D)
    if np.any(np.asarray(R) < 0):
        raise ValueError('R must be non-negative')
    pdf = np.exp(log_radius_pdf(R, r, N, D))
    return float(pdf) if np.ndim(pdf) == 0 else pdf


def radius_mode(r: float, N: int, D: float) -> float:
    return r * math.sqrt((N - 1) / (D + 1))


def radius_grid(
    r: float, N: int, D: float, n_points: int = 200_001, span: float = 1e4
) -> np.ndarray:
    """Log-spaced grid around the radial scale, wide enough for the tails."""
    scale = r * math.sqrt(N / D)
    return np.geomspace(scale / span, scale * span, n_points)


def radius_cdf(
    r: float, N: int, D: float, n_points: int = 200_001
) -> tuple[np.ndarray, np.ndarray]:
    """Trapezoidal CDF of p_r(R) on a log grid, pinned to 1 at the end."""
    grid = radius_grid(r, N, D, n_points)
    pdf = radius_pdf(grid, r, N, D)
    steps = 0.5 * (pdf[1:] + pdf[:-1]) * np.diff(grid)
    cdf = np.concatenate([[0.0], np.cumsum(steps)])
    return grid, cdf / cdf[-1]
