"""Denoisers, preconditioning and probability-flow drifts.

Every network is wrapped as a denoiser
f(x, sigma, y) = c_skip(sigma) x + c_out(sigma) F(c_in(sigma) x, c_noise, y)
and drifts are read off it as (x - f(x)) / sigma. The consistency form of
the coefficients pins f(x, sigma_min) = x; the EDM form is used for the
pretrained PFGM++ field, which has no boundary condition.
"""

import itertools
import logging
import math

import torch
from torch import nn

from pfcm.core.schema import ImageTensor, RunConfig
from pfcm.core.service import schedule_from_config
from pfcm.exceptions import MetadataMismatchError
from pfcm.field.network import build_network
from pfcm.field.schema import (
    ArchDescriptor,
    DenoiserMeta,
    Preconditioning,
    PreconditioningKind,
    Stage,
)

logger = logging.getLogger(__name__)


def coefficients(
    kind: PreconditioningKind,
    sigma: torch.Tensor,
    sigma_data: float,
    sigma_min: float,
) -> tuple[torch.Tensor, ...]:
    """(c_skip, c_out, c_in, c_noise) for a tensor of sigmas, in float64.

    ``consistency`` shifts c_skip and c_out by sigma_min so that they are
    exactly 1 and 0 there; ``edm`` has no boundary condition.
    """
    sigma = torch.as_tensor(sigma).double()
    sd = sigma_data
    if kind == 'consistency':
        shifted = sigma - sigma_min
        c_skip = sd**2 / (shifted**2 + sd**2)
        c_out = sd * shifted / torch.sqrt(sd**2 + sigma**2)
    else:
        c_skip = sd**2 / (sigma**2 + sd**2)
        c_out = sigma * sd / torch.sqrt(sigma**2 + sd**2)
    c_in = 1 / torch.sqrt(sigma**2 + sd**2)
    c_noise = torch.log(sigma) / 4
    return c_skip, c_out, c_in, c_noise


def _scalar(
    kind: PreconditioningKind,
    sigma: float,
    sigma_data: float,
    sigma_min: float = 0.0,
) -> Preconditioning:
    values = coefficients(
        kind, torch.tensor(sigma, dtype=torch.float64), sigma_data, sigma_min
    )
    return Preconditioning(*(float(v) for v in values))


def precondition(
    sigma: float, sigma_data: float, sigma_min: float
) -> Preconditioning:
    """Boundary-shifted coefficients: c_skip(sigma_min) = 1, c_out = 0."""
    if sigma < sigma_min:
        raise ValueError(f'sigma {sigma} is below sigma_min {sigma_min}')
    return _scalar('consistency', sigma, sigma_data, sigma_min)


def edm_precondition(sigma: float, sigma_data: float) -> Preconditioning:
    if sigma <= 0:
        raise ValueError('sigma must be positive')
    return _scalar('edm', sigma, sigma_data)


class DenoiserBase(nn.Module):
    """A denoiser with metadata and a forward-evaluation counter."""

    def __init__(self, meta: DenoiserMeta):
        super().__init__()
        self.meta = meta
        self.nfe = 0

    def forward(
        self,
        x_sigma: torch.Tensor,
        sigma: torch.Tensor,
        y: torch.Tensor | None = None,
    ) -> torch.Tensor:
        self.nfe += 1
        return self.denoise(x_sigma, sigma, y)

    def denoise(
        self,
        x_sigma: torch.Tensor,
        sigma: torch.Tensor,
        y: torch.Tensor | None,
    ) -> torch.Tensor:
        raise NotImplementedError


class Denoiser(DenoiserBase):
    def __init__(self, net: nn.Module, meta: DenoiserMeta):
        super().__init__(meta)
        self.net = net

    def denoise(self, x_sigma, sigma, y):
        meta = self.meta
        values = coefficients(
            meta.preconditioning, sigma, meta.sigma_data, meta.sigma_min
        )
        c_skip, c_out, c_in, c_noise = (
            c.to(device=x_sigma.device) for c in values
        )

        def expand(c: torch.Tensor) -> torch.Tensor:
            return c.to(x_sigma.dtype)[:, None, None, None]

        x_in = expand(c_in) * x_sigma
        if self.meta.conditioning == 'concat':
            if y is None:
                raise ValueError('a conditional denoiser needs y')
            x_in = torch.cat([x_in, y.to(x_in.dtype)], dim=1)
        F = self.net(x_in, c_noise.to(x_sigma.dtype))
        return expand(c_skip) * x_sigma + expand(c_out) * F.to(x_sigma.dtype)


class IdealPointDenoiser(DenoiserBase):
    """Exact denoiser of a one-point dataset {x0}: always returns x0."""

    def __init__(self, x0: ImageTensor, meta: DenoiserMeta):
        super().__init__(meta)
        self.register_buffer('x0', x0.detach().clone())

    def denoise(self, x_sigma, sigma, y):
        return self.x0.to(x_sigma.dtype).expand_as(x_sigma).clone()


def build_meta(
    config: RunConfig,
    stage: Stage,
    preconditioning: PreconditioningKind,
    arch: ArchDescriptor | None = None,
) -> DenoiserMeta:
    if arch is None:
        arch = ArchDescriptor(
            width=config.width,
            levels=config.levels,
            dropout=config.dropout if stage == 'pfgmpp' else 0.0,
        )
    return DenoiserMeta(
        D=config.d,
        sigma_min=config.sigma_min,
        sigma_max=config.sigma_max,
        rho=config.rho,
        n_steps=config.n_steps,
        sigma_data=config.sigma_data,
        conditioning=config.conditioning,
        arch=arch,
        stage=stage,
        preconditioning=preconditioning,
        schedule_hash=schedule_from_config(config).digest(),
    )


def build_denoiser(meta: DenoiserMeta) -> Denoiser:
    in_channels = 2 if meta.conditioning == 'concat' else 1
    return Denoiser(build_network(meta.arch, in_channels), meta)


def condition_on(
    model: DenoiserBase, y: ImageTensor | None
) -> ImageTensor | None:
    """y for conditional models, None for unconditional ones."""
    return y if model.meta.conditioning == 'concat' else None


def check_stage(model: DenoiserBase, stage: Stage) -> None:
    if model.meta.stage != stage:
        raise MetadataMismatchError(
            f'expected a {stage} model, got stage {model.meta.stage}'
        )


def check_d(model: DenoiserBase, D: float | None) -> None:
    if D is not None and D != model.meta.D:
        raise MetadataMismatchError(
            f'model was trained with D={model.meta.D}, called with D={D}'
        )


def model_device(model: nn.Module) -> torch.device:
    """Device of the model's first parameter or buffer (cpu if it has none)."""
    tensor = next(itertools.chain(model.parameters(), model.buffers()), None)
    return torch.device('cpu') if tensor is None else tensor.device


def _as_batch(
    x: torch.Tensor,
) -> tuple[torch.Tensor, bool]:
    if x.ndim == 2:
        return x[None, None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f'expected (n, n) or (B, C, n, n), got {tuple(x.shape)}')


def _sigma_vector(
    sigma: float | torch.Tensor, batch: int, device: torch.device
) -> torch.Tensor:
    sigma = torch.as_tensor(sigma, dtype=torch.float64, device=device)
    if sigma.ndim == 0:
        sigma = sigma.expand(batch)
    if sigma.shape != (batch,):
        raise ValueError(f'sigma shape {tuple(sigma.shape)} for batch {batch}')
    return sigma


def f_apply(
    theta: DenoiserBase,
    x_sigma: ImageTensor,
    sigma: float | torch.Tensor,
    y: ImageTensor | None = None,
    D: float | None = None,
) -> ImageTensor:
    """c_skip x + c_out F(c_in x, c_noise, y) for one image or a batch.

    Raises:
        ValueError: shape mismatch between x_sigma and y
        MetadataMismatchError: D differs from the model's D
    """
    check_d(theta, D)
    if y is not None and y.shape != x_sigma.shape:
        raise ValueError(
            f'shape mismatch: x {tuple(x_sigma.shape)} y {tuple(y.shape)}'
        )
    x, single = _as_batch(x_sigma)
    if y is not None:
        y, _ = _as_batch(y)
    out = theta(x, _sigma_vector(sigma, x.shape[0], x.device), y)
    return out[0, 0] if single else out


def _per_sample(sigma: float | torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    sigma = torch.as_tensor(sigma, dtype=torch.float64, device=x.device)
    if sigma.ndim == 0:
        return sigma.to(x.dtype)
    return sigma.to(x.dtype).reshape(-1, *([1] * (x.ndim - 1)))


def phi_pfgmpp(
    phi: DenoiserBase,
    x_sigma: ImageTensor,
    sigma: float | torch.Tensor,
    y: ImageTensor | None = None,
    D: float | None = None,
) -> ImageTensor:
    """dx/dsigma of the PFGM++ flow under r = sigma sqrt(D).

    The field ratio sqrt(D) E_x / E_r equals (x - E[x0 | x_sigma]) / sigma,
    so it is read off the denoiser.
    """
    denoised = f_apply(phi, x_sigma, sigma, y, D)
    return (x_sigma - denoised) / _per_sample(sigma, x_sigma)


def phi_edm(
    phi: DenoiserBase,
    x_sigma: ImageTensor,
    sigma: float | torch.Tensor,
    y: ImageTensor | None = None,
    D: float | None = None,
) -> ImageTensor:
    """dx/dsigma = -sigma * score of the Gaussian-perturbed density."""
    denoised = f_apply(phi, x_sigma, sigma, y, D)
    s = _per_sample(sigma, x_sigma)
    score = (denoised - x_sigma) / s**2
    return -s * score


def drift_for(phi: DenoiserBase):
    """The drift matching the kernel the model was trained with."""
    return phi_edm if math.isinf(phi.meta.D) else phi_pfgmpp


def ideal_field_single_point(
    x_sigma: ImageTensor, sigma: float, x0: ImageTensor
) -> ImageTensor:
    if sigma == 0:
        raise ValueError('the single-point field is singular at sigma = 0')
    return (x_sigma - x0) / sigma
