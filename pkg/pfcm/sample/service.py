"""Inference paths: one-step PFCM sampling, the task-specific sampler and
the multi-step Heun solver for the pretrained field.

Heun counting convention: the descending schedule is extended by a final
sigma = 0. Each of the n_steps - 1 intervals between schedule entries costs
a predictor and a corrector evaluation; the last sigma_min -> 0 step is an
Euler step. A 40-level schedule therefore costs 2 * 39 + 1 = 79 evaluations.
"""

import logging
from collections.abc import Callable

import torch

from pfcm.core.schema import ImageTensor, NoiseSchedule
from pfcm.core.service import Seed, build_schedule
from pfcm.field.schema import DenoiserMeta
from pfcm.field.service import (
    DenoiserBase,
    check_stage,
    condition_on,
    drift_for,
    f_apply,
)
from pfcm.pfkernel.service import sample_prior
from pfcm.sample.schema import SampleReport, SamplerName, TaskSamplerConfig

logger = logging.getLogger(__name__)


def schedule_for(meta: DenoiserMeta) -> NoiseSchedule:
    return build_schedule(
        meta.sigma_min, meta.sigma_max, meta.rho, meta.n_steps
    )


def regularize(
    x_hat: ImageTensor, x: ImageTensor, w: float
) -> ImageTensor:
    """w x_hat + (1 - w) x; exact at w = 0 and w = 1."""
    if not 0 <= w <= 1:
        raise ValueError(f'w = {w} outside [0, 1]')
    return torch.lerp(x, x_hat.to(x.dtype), w)


@torch.no_grad()
def pfcm_sample(
    theta: DenoiserBase, y: ImageTensor, seed: Seed
) -> SampleReport:
    check_stage(theta, 'pfcm')
    theta.eval()
    meta = theta.meta
    start = theta.nfe

    x = sample_prior(meta.sigma_max, meta.D, y.numel(), seed).to(y)
    out = f_apply(theta, x, meta.sigma_max, condition_on(theta, y))

    return SampleReport(
        output=out, nfe=theta.nfe - start, sampler='vanilla'
    )


@torch.no_grad()
def task_specific_sample(
    theta: DenoiserBase, y: ImageTensor, cfg: TaskSamplerConfig
) -> SampleReport:
    """Hijack with x = y, denoise at sigma_hat, mix back with y."""
    check_stage(theta, 'pfcm')
    theta.eval()
    sigma_hat = cfg.resolve_sigma(schedule_for(theta.meta))
    start = theta.nfe

    x = y
    x_hat = f_apply(theta, x, sigma_hat, condition_on(theta, y))
    out = regularize(x_hat, x, cfg.w)

    return SampleReport(
        output=out,
        nfe=theta.nfe - start,
        sampler='task',
        config={'sigma_hat': sigma_hat, 'w': cfg.w},
    )


def hijack_only(
    theta: DenoiserBase, y: ImageTensor, sigma_hat: float
) -> SampleReport:
    report = task_specific_sample(
        theta, y, TaskSamplerConfig(sigma_hat=sigma_hat, w=1.0)
    )
    report.sampler = 'hijack'
    return report


def regularize_only(
    theta: DenoiserBase, y: ImageTensor, w: float, seed: Seed
) -> SampleReport:
    """Vanilla sample from the prior, then mixed with y."""
    report = pfcm_sample(theta, y, seed)
    return SampleReport(
        output=regularize(report.output, y, w),
        nfe=report.nfe,
        sampler='reg',
        config={'w': w},
    )


@torch.no_grad()
def heun_integrate(
    phi: DenoiserBase,
    x: ImageTensor,
    y: ImageTensor,
    sched: NoiseSchedule,
    callback: Callable[[float, ImageTensor], None] | None = None,
) -> ImageTensor:
    """Integrates dx = Phi(x, sigma, y) dsigma from sigma_max down to 0.

    ``callback(sigma, x)`` sees the state at every schedule level before
    the step leaving it.
    """
    drift = drift_for(phi)
    cond = condition_on(phi, y)
    sigmas = [*sched.sigmas, 0.0]

    for s_cur, s_next in zip(sigmas, sigmas[1:]):
        if callback is not None:
            callback(s_cur, x)
        d_cur = drift(phi, x, s_cur, cond)
        x_next = x + (s_next - s_cur) * d_cur
        if s_next > 0:
            d_next = drift(phi, x_next, s_next, cond)
            x_next = x + (s_next - s_cur) * (0.5 * d_cur + 0.5 * d_next)
        x = x_next
    return x


def heun_sample(
    phi: DenoiserBase,
    y: ImageTensor,
    sched: NoiseSchedule,
    seed: Seed,
) -> SampleReport:
    check_stage(phi, 'pfgmpp')
    phi.eval()
    start = phi.nfe

    x = sample_prior(sched.sigma_max, phi.meta.D, y.numel(), seed).to(y)
    out = heun_integrate(phi, x, y, sched)

    return SampleReport(
        output=out,
        nfe=phi.nfe - start,
        sampler='heun',
        config={'n_steps': sched.n_steps},
    )


def run_sampler(
    name: SamplerName,
    model: DenoiserBase,
    y: ImageTensor,
    seed: Seed,
    cfg: TaskSamplerConfig | None = None,
) -> SampleReport:
    """Dispatches one of the sampler names used by the CLI and reports."""
    if name == 'input':
        return SampleReport(output=y.clone(), nfe=0, sampler='input')
    if name == 'vanilla':
        return pfcm_sample(model, y, seed)
    if name == 'heun':
        return heun_sample(model, y, schedule_for(model.meta), seed)

    if cfg is None:
        raise ValueError(f'sampler {name!r} needs a TaskSamplerConfig')
    if name == 'task':
        return task_specific_sample(model, y, cfg)
    if name == 'hijack':
        sigma_hat = cfg.resolve_sigma(schedule_for(model.meta))
        return hijack_only(model, y, sigma_hat)
    if name == 'reg':
        return regularize_only(model, y, cfg.w, seed)
    raise ValueError(f'unknown sampler {name!r}')
