"""PFGM++ pretraining and consistency distillation.

Randomness is drawn from step-indexed streams (batch, sigma and kernel draws
of step k only depend on the run seed and k), so data loading can run ahead
in worker processes and a resumed run replays the same draws.
"""

import copy
import logging
import math
import sys
import time
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from pfcm.core.schema import ImageTensor, RunConfig
from pfcm.core.service import (
    Seed,
    derive_seed,
    make_rng,
    seed_everything,
)
from pfcm.exceptions import NumericalError
from pfcm.field.repository import check_compatible, load_checkpoint
from pfcm.field.service import (
    Denoiser,
    DenoiserBase,
    build_denoiser,
    build_meta,
    check_d,
    check_stage,
    condition_on,
    drift_for,
    f_apply,
    model_device,
)
from pfcm.phantoms.schema import PairedSample
from pfcm.phantoms.service import augment, extract_patch
from pfcm.pfkernel.service import perturb, sample_prior
from pfcm.sample.service import heun_integrate, schedule_for
from pfcm.settings import Settings
from pfcm.train.repository import (
    checkpoint_path,
    load_training_state,
    save_training_state,
)
from pfcm.train.schema import DistillConfig, LossRecord, Metric

logger = logging.getLogger(__name__)

SIGMA_LOG_MEAN = -1.2
SIGMA_LOG_STD = 1.2
PSEUDO_HUBER_SCALE = 0.00054

# stream ids for derive_seed(seed, stream, step)
BATCH_STREAM, PRETRAIN_STREAM, DISTILL_STREAM = 1, 2, 3

METRICS: dict[str, Metric] = {}


def register_metric(name: str) -> Callable[[Metric], Metric]:
    """Registers a per-sample distance under ``name``.

    Any callable mapping two (B, C, n, n) batches to a (B,) tensor works,
    e.g. an adapter around a perceptual feature network.
    """

    def decorator(metric: Metric) -> Metric:
        METRICS[name] = metric
        return metric

    return decorator


@register_metric('l2')
def l2_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).square().flatten(1).mean(dim=1)


@register_metric('pseudo_huber')
def pseudo_huber_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """sqrt(||a - b||^2 + c^2) - c with c = 0.00054 sqrt(N)."""
    c = PSEUDO_HUBER_SCALE * math.sqrt(a[0].numel())
    return torch.sqrt((a - b).square().flatten(1).sum(dim=1) + c**2) - c


def get_metric(name: str) -> Metric:
    try:
        return METRICS[name]
    except KeyError as e:
        known = ', '.join(sorted(METRICS))
        raise ValueError(f'unknown metric {name!r}, known: {known}') from e


class PairedPatchDataset(Dataset):
    """Item k is the k-th training batch: random pairs, patches and flips."""

    def __init__(
        self,
        samples: Sequence[PairedSample],
        batch: int,
        patch: int,
        seed: int,
        length: int,
    ):
        if not samples:
            raise ValueError('the training set is empty')
        self.samples = samples
        self.batch = batch
        self.patch = patch
        self.seed = seed
        self.length = length

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, step: int) -> dict:
        rng = make_rng(derive_seed(self.seed, BATCH_STREAM, step))
        clean, noisy = [], []
        for idx in rng.integers(len(self.samples), size=self.batch):
            sample = self.samples[idx]
            patch = min(self.patch, sample.clean.shape[-1])
            pair = augment(
                extract_patch(sample.clean, sample.noisy, patch, rng), rng
            )
            clean.append(pair.clean)
            noisy.append(pair.noisy)
        return {
            'clean': torch.stack(clean)[:, None],
            'noisy': torch.stack(noisy)[:, None],
            'step': step,
        }


def sample_training_sigma(
    seed: Seed, size: int, sigma_min: float, sigma_max: float
) -> np.ndarray:
    """Log-normal noise levels clamped to [sigma_min, sigma_max]."""
    rng = make_rng(seed)
    sigma = np.exp(rng.normal(SIGMA_LOG_MEAN, SIGMA_LOG_STD, size=size))
    return np.clip(sigma, sigma_min, sigma_max)


def drift_matching_loss(
    phi: DenoiserBase,
    clean: torch.Tensor,
    x_sigma: torch.Tensor,
    sigma: torch.Tensor,
    y: torch.Tensor | None,
    weighting: str = 'drift',
) -> torch.Tensor:
    """Mean squared residual of the drift against (x_sigma - x) / sigma."""
    s = sigma.to(clean.dtype).reshape(-1, 1, 1, 1)
    drift = drift_for(phi)(phi, x_sigma, sigma, condition_on(phi, y))
    target = (x_sigma - clean) / s
    per_sample = (drift - target).square().flatten(1).mean(dim=1)
    if weighting == 'edm':
        sd = phi.meta.sigma_data
        per_sample = per_sample * (s.flatten() ** 2 + sd**2) / sd**2
    return per_sample.mean()


def pfgmpp_loss(
    phi: DenoiserBase,
    clean: torch.Tensor,
    noisy: torch.Tensor,
    D: float,
    seed: Seed,
    weighting: str = 'drift',
    sigma: float | torch.Tensor | None = None,
) -> torch.Tensor:
    """Draws sigma and x_sigma ~ p_r(. | x), returns the drift loss.

    Raises:
        MetadataMismatchError: D differs from the model's D
    """
    check_d(phi, D)
    rng = make_rng(seed)
    batch = clean.shape[0]
    if sigma is None:
        sigma = sample_training_sigma(
            rng, batch, phi.meta.sigma_min, phi.meta.sigma_max
        )
    sigma = torch.as_tensor(
        sigma, dtype=torch.float64, device=clean.device
    ).expand(batch)
    x_sigma = perturb(clean, sigma, D, rng)
    return drift_matching_loss(phi, clean, x_sigma, sigma, noisy, weighting)


def make_optimizer(
    params, name: str, lr: float
) -> torch.optim.Optimizer:
    if name == 'radam':
        return torch.optim.RAdam(params, lr=lr)
    if name == 'adam':
        return torch.optim.Adam(params, lr=lr)
    raise ValueError(f'unknown optimizer {name!r}')


def _progress_disabled() -> bool:
    return not sys.stderr.isatty() or logger.getEffectiveLevel() > logging.INFO


def _loader(
    dataset: PairedPatchDataset, start: int, workers: int
) -> DataLoader:
    return DataLoader(
        dataset,
        batch_size=None,
        sampler=range(start, len(dataset)),
        num_workers=workers,
    )


def _resume(
    path: Path,
    model: Denoiser,
    optimizer: torch.optim.Optimizer,
    target: Denoiser | None = None,
) -> tuple[int, list[LossRecord]]:
    loaded = load_checkpoint(path, model.meta.stage, expected=model.meta)
    model.net.load_state_dict(loaded.net.state_dict())
    state = load_training_state(path)
    optimizer.load_state_dict(state['optimizer'])
    torch.set_rng_state(state['rng'])
    if target is not None:
        target.net.load_state_dict(state['target'])
    logger.info('resumed from %s at iter=%d', path, state['iteration'])
    return state['iteration'], state['trace']


def _abort(
    out_dir: Path | None,
    model: Denoiser,
    optimizer: torch.optim.Optimizer,
    iteration: int,
    trace: list[LossRecord],
    target: Denoiser | None = None,
) -> NumericalError:
    # parameters are still those of the last finite step
    message = f'non-finite loss at iter={iteration + 1}'
    if out_dir is not None:
        path = checkpoint_path(out_dir, model.meta.stage, iteration)
        save_training_state(path, model, optimizer, iteration, trace, target)
        message += f', last good checkpoint {path}'
    logger.error(message)
    return NumericalError(message)


def pretrain(
    samples: Sequence[PairedSample],
    config: RunConfig,
    out_dir: Path | None = None,
    resume: Path | None = None,
    settings: Settings | None = None,
) -> tuple[Denoiser, list[LossRecord]]:
    """Trains the PFGM++ denoiser phi on paired patches.

    Returns the trained model and its loss trace. With ``iters = 0`` the
    initialization is returned unchanged.

    Raises:
        ValueError: empty training set
        NumericalError: the loss became NaN or infinite
    """
    settings = settings or Settings()
    seed_everything(config.seed)
    phi = build_denoiser(build_meta(config, 'pfgmpp', 'edm'))
    phi = phi.to(settings.DEVICE)
    optimizer = make_optimizer(phi.parameters(), config.optimizer, config.lr)
    dataset = PairedPatchDataset(
        samples, config.batch, config.patch, config.seed, config.iters
    )

    start, trace = 0, []
    if resume is not None:
        start, trace = _resume(resume, phi, optimizer)

    phi.train()
    clock = time.perf_counter()
    progress = tqdm(
        _loader(dataset, start, settings.WORKERS),
        total=config.iters - start,
        desc='pretrain',
        disable=_progress_disabled(),
    )
    for batch in progress:
        step = batch['step']
        clean = batch['clean'].to(settings.DEVICE)
        noisy = batch['noisy'].to(settings.DEVICE)
        loss = pfgmpp_loss(
            phi,
            clean,
            noisy,
            config.d,
            derive_seed(config.seed, PRETRAIN_STREAM, step),
            config.loss_weighting,
        )
        value = loss.item()
        if not math.isfinite(value):
            raise _abort(out_dir, phi, optimizer, step, trace)

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        trace.append(
            LossRecord(
                iteration=step + 1,
                loss=value,
                lr=config.lr,
                wallclock=time.perf_counter() - clock,
            )
        )
        progress.set_postfix(loss=f'{value:.4g}')
        if out_dir is not None and (step + 1) % config.checkpoint_every == 0:
            path = checkpoint_path(out_dir, 'pfgmpp', step + 1)
            save_training_state(path, phi, optimizer, step + 1, trace)
            logger.info(
                'iter=%d loss=%.4g lr=%g', step + 1, value, config.lr
            )

    phi.eval()
    return phi, trace


def ema_update(target: nn.Module, online: nn.Module, mu: float) -> None:
    """theta_minus <- stopgrad(mu theta_minus + (1 - mu) theta)."""
    if not 0 <= mu <= 1:
        raise ValueError(f'EMA decay {mu} outside [0, 1]')
    if mu == 1:
        return
    with torch.no_grad():
        for p_target, p in zip(target.parameters(), online.parameters()):
            if mu == 0:
                p_target.copy_(p)
            else:
                p_target.mul_(mu).add_(p, alpha=1 - mu)


def consistency_loss(
    theta: DenoiserBase,
    theta_minus: DenoiserBase,
    x_next: torch.Tensor,
    sigma_next: torch.Tensor,
    x_hat: torch.Tensor,
    sigma_cur: torch.Tensor,
    y: torch.Tensor | None,
    metric: Metric,
) -> torch.Tensor:
    """d(f_theta(x_next, sigma_next), f_theta_minus(x_hat, sigma_cur)).

    The weighting lambda is constant 1 and the target branch carries no
    gradient.
    """
    online = f_apply(theta, x_next, sigma_next, condition_on(theta, y))
    with torch.no_grad():
        target = f_apply(
            theta_minus, x_hat, sigma_cur, condition_on(theta_minus, y)
        )
    return metric(online, target).mean()


def distill_step(
    theta: Denoiser,
    theta_minus: Denoiser,
    phi: DenoiserBase,
    clean: torch.Tensor,
    noisy: torch.Tensor,
    i: int | Sequence[int],
    config: DistillConfig,
    seed: Seed,
    optimizer: torch.optim.Optimizer,
) -> float:
    """One consistency-distillation update on a batch.

    ``i`` indexes the ascending grid sigma_1 = sigma_min < ... < sigma_n,
    one index per sample or one for the whole batch, in [1, n_steps - 1].

    Raises:
        ValueError: index out of range
        NumericalError: non-finite loss
    """
    sched = schedule_for(theta.meta)
    batch = clean.shape[0]
    indices = np.broadcast_to(np.asarray(i), (batch,))
    if indices.min() < 1 or indices.max() > sched.n_steps - 1:
        raise ValueError(f'i must lie in [1, {sched.n_steps - 1}]')

    sigma_cur = torch.tensor(
        [sched.ascending(int(k)) for k in indices],
        dtype=torch.float64,
        device=clean.device,
    )
    sigma_next = torch.tensor(
        [sched.ascending(int(k) + 1) for k in indices],
        dtype=torch.float64,
        device=clean.device,
    )
    rng = make_rng(seed)
    x_next = perturb(clean, sigma_next, config.D, rng)

    with torch.no_grad():
        drift = drift_for(phi)(
            phi, x_next, sigma_next, condition_on(phi, noisy)
        )
        step = (sigma_cur - sigma_next).to(clean.dtype).reshape(-1, 1, 1, 1)
        x_hat = x_next + step * drift

    loss = consistency_loss(
        theta,
        theta_minus,
        x_next,
        sigma_next,
        x_hat,
        sigma_cur,
        noisy,
        get_metric(config.metric),
    )
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError('non-finite consistency loss')

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    ema_update(theta_minus, theta, config.mu)
    return value


@torch.no_grad()
def consistency_gap(
    theta: DenoiserBase,
    phi: DenoiserBase,
    ys: Sequence[ImageTensor],
    seed: int,
) -> float:
    """Mean ||f(x_a, sigma_a) - f(x_b, sigma_b)|| over adjacent levels of
    Heun trajectories of phi started from prior draws.
    """
    was_training = theta.training
    theta.eval()
    sched = schedule_for(phi.meta)
    device = model_device(theta)
    gaps = []
    for k, y in enumerate(ys):
        y = y.to(device)
        outputs = []

        def record(sigma: float, x: ImageTensor):
            outputs.append(f_apply(theta, x, sigma, condition_on(theta, y)))

        x = sample_prior(
            sched.sigma_max, phi.meta.D, y.numel(), derive_seed(seed, k)
        ).to(y)
        heun_integrate(phi, x, y, sched, callback=record)
        gaps.extend(
            float((a - b).norm()) for a, b in zip(outputs, outputs[1:])
        )
    theta.train(was_training)
    return float(np.mean(gaps))


def init_student(phi: DenoiserBase, config: DistillConfig) -> Denoiser:
    """PFCM student sharing phi's architecture, initialized from phi's F."""
    arch = phi.meta.arch.model_copy(update={'dropout': 0.0})
    theta = build_denoiser(build_meta(config.run, 'pfcm', 'consistency', arch))
    if isinstance(phi, Denoiser):
        theta.net.load_state_dict(phi.net.state_dict())
    return theta


def distill(
    phi: DenoiserBase,
    samples: Sequence[PairedSample],
    config: DistillConfig,
    out_dir: Path | None = None,
    resume: Path | None = None,
    settings: Settings | None = None,
) -> tuple[Denoiser, list[LossRecord]]:
    """Distills the frozen pretrained field phi into a PFCM.

    Raises:
        MetadataMismatchError: phi is not a pfgmpp model or its D, schedule
            or conditioning differ from ``config``
        NumericalError: the loss became NaN or infinite
    """
    settings = settings or Settings()
    run = config.run
    check_stage(phi, 'pfgmpp')
    check_compatible(
        phi.meta,
        build_meta(run, 'pfgmpp', phi.meta.preconditioning, phi.meta.arch),
    )

    seed_everything(run.seed)
    theta = init_student(phi, config).to(settings.DEVICE)
    theta_minus = copy.deepcopy(theta).requires_grad_(False)
    phi.eval().requires_grad_(False)
    optimizer = make_optimizer(theta.parameters(), run.optimizer, config.lr)
    dataset = PairedPatchDataset(
        samples, run.batch, run.patch, run.seed, run.iters
    )
    gap_ys = [s.noisy for s in samples[:1]]

    start, trace = 0, []
    if resume is not None:
        start, trace = _resume(resume, theta, optimizer, theta_minus)

    theta.train()
    clock = time.perf_counter()
    progress = tqdm(
        _loader(dataset, start, settings.WORKERS),
        total=run.iters - start,
        desc='distill',
        disable=_progress_disabled(),
    )
    for batch in progress:
        step = batch['step']
        clean = batch['clean'].to(settings.DEVICE)
        noisy = batch['noisy'].to(settings.DEVICE)
        rng = make_rng(derive_seed(run.seed, DISTILL_STREAM, step))
        i = rng.integers(1, run.n_steps, size=clean.shape[0])
        try:
            value = distill_step(
                theta, theta_minus, phi, clean, noisy, i, config, rng,
                optimizer,
            )
        except NumericalError:
            raise _abort(
                out_dir, theta, optimizer, step, trace, theta_minus
            ) from None

        gap = None
        if config.gap_every and (step + 1) % config.gap_every == 0:
            gap = consistency_gap(theta, phi, gap_ys, run.seed)
        trace.append(
            LossRecord(
                iteration=step + 1,
                loss=value,
                lr=config.lr,
                wallclock=time.perf_counter() - clock,
                consistency_gap=gap,
            )
        )
        progress.set_postfix(loss=f'{value:.4g}')
        if out_dir is not None and (step + 1) % run.checkpoint_every == 0:
            path = checkpoint_path(out_dir, 'pfcm', step + 1)
            save_training_state(
                path, theta, optimizer, step + 1, trace, theta_minus
            )
            logger.info('iter=%d loss=%.4g lr=%g', step + 1, value, config.lr)

    theta.eval()
    return theta, trace
