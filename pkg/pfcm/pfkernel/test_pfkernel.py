"""Testes para o kernel de perturbação do PFGM++."""

import math

import numpy as np
import pytest
import torch
from scipy import stats
from scipy.integrate import trapezoid

from pfcm.pfkernel.repository import cached_radius_cdf, cdf_table_path
from pfcm.pfkernel.service import (
    align_r,
    perturb,
    radius_grid,
    radius_mode,
    radius_pdf,
    sample_angle,
    sample_perturbation,
    sample_prior,
    sample_radius,
)

DRAWS = 100_000


def ks_statistic(draws: np.ndarray, grid: np.ndarray, cdf: np.ndarray):
    draws = np.sort(draws)
    model = np.interp(draws, grid, cdf)
    upper = np.arange(1, draws.size + 1) / draws.size
    lower = np.arange(draws.size) / draws.size
    return max(np.max(upper - model), np.max(model - lower))


@pytest.mark.parametrize(
    ('sigma', 'D', 'expected'),
    [(380.0, 128.0, 380 * math.sqrt(128)), (0.0, 128.0, 0.0), (2.5, 1, 2.5)],
)
def test_align_r(sigma, D, expected):
    assert align_r(sigma, D) == pytest.approx(expected)


def test_align_r_value():
    assert align_r(380.0, 128.0) == pytest.approx(4299.209, abs=1e-3)


@pytest.mark.parametrize(
    ('N', 'D', 'r'),
    [(4, 6.0, 2.0), (16, 128.0, 1.0), (256, 262144.0, 5.0)],
)
def test_radius_second_moment(N, D, r):
    R = sample_radius(r, N=N, D=D, seed=0, size=DRAWS)

    # E[B / (1 - B)] = (N / 2) / (D / 2 - 1) for B ~ Beta(N/2, D/2)
    assert np.mean(R**2) == pytest.approx(r**2 * N / (D - 2), rel=0.03)


@pytest.mark.parametrize(
    ('N', 'D', 'r'),
    [(16, 128.0, 1.0), (64, 2048.0, 10.0), (256, 262144.0, 5.0)],
)
def test_radius_matches_numerical_cdf(tmp_path, N, D, r):
    grid, cdf = cached_radius_cdf(tmp_path, r, N, D)

    R = sample_radius(r, N, D, seed=1, size=DRAWS)

    assert ks_statistic(R, grid, cdf) < 0.01


def test_cached_cdf_is_reused(tmp_path):
    grid, cdf = cached_radius_cdf(tmp_path, 1.0, 16, 128.0, n_points=1001)

    assert cdf_table_path(tmp_path, 1.0, 16, 128.0).with_suffix(
        '.json'
    ).exists()
    again_grid, again_cdf = cached_radius_cdf(
        tmp_path, 1.0, 16, 128.0, n_points=1001
    )
    assert np.array_equal(grid, again_grid)
    assert np.array_equal(cdf, again_cdf)


def test_radius_scales_with_r():
    unit = sample_radius(1.0, N=16, D=128, seed=4, size=10)
    tiny = sample_radius(1e-12, N=16, D=128, seed=4, size=10)

    np.testing.assert_allclose(tiny, 1e-12 * unit, rtol=1e-12)


@pytest.mark.parametrize('D', [2.0, 1.0, math.nan])
def test_radius_rejects_small_d(D):
    with pytest.raises(ValueError, match='D must be > 2'):
        sample_radius(1.0, N=4, D=D, seed=0)


def test_radius_needs_finite_d():
    with pytest.raises(ValueError, match='finite D'):
        sample_radius(1.0, N=4, D=math.inf, seed=0)


def test_angle_is_unit_and_isotropic():
    N = 16
    v = sample_angle(N, seed=2, size=DRAWS)

    np.testing.assert_allclose(np.linalg.norm(v, axis=-1), 1.0, atol=1e-6)
    assert np.abs(v.mean(axis=0)).max() < 0.01
    np.testing.assert_allclose((v**2).mean(axis=0), 1 / N, rtol=0.05)



def test_angle_covariance_is_diagonal():
    N = 16
    v = sample_angle(N, seed=3, size=DRAWS)

    cov = v.T @ v / DRAWS

    off_diagonal = cov[~np.eye(N, dtype=bool)]
    assert np.abs(off_diagonal).max() < 0.01
    np.testing.assert_allclose(np.diag(cov), 1 / N, rtol=0.05)

def test_zero_sigma_leaves_image_unchanged(x0):
    assert torch.equal(perturb(x0, 0.0, 128.0, seed=0), x0)


def test_perturbation_norm_equals_drawn_radius(x0):
    x = x0.double()
    draw = sample_perturbation(x.numel(), np.asarray(0.7), 128.0, seed=5)

    x_sigma = perturb(x, 0.7, 128.0, seed=5)

    assert float((x_sigma - x).norm()) == pytest.approx(float(draw.R))


def test_batched_sigmas_broadcast(x0):
    batch = x0.double().expand(3, 1, 16, 16)
    sigma = np.array([0.0, 1.0, 10.0])

    x_sigma = perturb(batch, sigma, 128.0, seed=0)

    assert x_sigma.shape == batch.shape
    assert torch.equal(x_sigma[0], batch[0])
    assert (x_sigma[2] - batch[2]).norm() > (x_sigma[1] - batch[1]).norm()


@pytest.mark.parametrize('D', [1e6, math.inf])
def test_large_d_approaches_gaussian(D):
    sigma, N = 0.5, 256
    x = torch.zeros(2000, 16, 16, dtype=torch.float64)

    noise = perturb(x, sigma, D, seed=6)
    mean_sq = float(noise.square().sum(dim=(-2, -1)).mean()) / N

    expected = sigma**2 * (D / (D - 2) if math.isfinite(D) else 1.0)
    assert mean_sq == pytest.approx(expected, rel=0.01)



def test_large_d_pixels_are_gaussian():
    sigma = 0.5
    x = torch.zeros(20_000, 16, 16, dtype=torch.float64)

    noise = perturb(x, sigma, 1e6, seed=8).flatten(1).numpy()

    np.testing.assert_allclose(noise.std(axis=0), sigma, rtol=0.02)
    assert stats.normaltest(noise[:, 0]).pvalue > 0.001

def test_prior_radius_matches_numerical_cdf(tmp_path):
    sigma_max, D, N = 1.0, 128.0, 16
    grid, cdf = cached_radius_cdf(tmp_path, align_r(sigma_max, D), N, D)

    prior = sample_prior(sigma_max, D, N, seed=7, size=(DRAWS,))
    radii = prior.double().flatten(1).norm(dim=1).numpy()

    assert prior.shape == (DRAWS, 4, 4)
    assert ks_statistic(radii, grid, cdf) < 0.01


def test_prior_depends_on_seed():
    a = sample_prior(80.0, 128.0, 64, seed=0)
    b = sample_prior(80.0, 128.0, 64, seed=1)

    assert a.shape == (8, 8)
    assert not torch.equal(a, b)


def test_prior_rejects_non_square_size():
    with pytest.raises(ValueError, match='not a square'):
        sample_prior(80.0, 128.0, 10, seed=0)


def test_pdf_vanishes_at_origin():
    assert radius_pdf(0.0, 1.0, 16, 128.0) == 0.0


def test_pdf_mode():
    r, N, D = 1.0, 16, 128.0
    grid = radius_grid(r, N, D)

    argmax = grid[np.argmax(radius_pdf(grid, r, N, D))]

    assert argmax == pytest.approx(radius_mode(r, N, D), rel=1e-3)
    assert radius_mode(r, N, D) == pytest.approx(math.sqrt(15 / 129))


@pytest.mark.parametrize(
    ('N', 'D', 'r'), [(16, 128.0, 1.0), (64, 2048.0, 10.0), (4, 6.0, 2.0)]
)
def test_pdf_is_normalized(N, D, r):
    grid = radius_grid(r, N, D)

    assert trapezoid(radius_pdf(grid, r, N, D), grid) == pytest.approx(
        1.0, abs=1e-6
    )
