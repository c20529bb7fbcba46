import logging
import math
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import torch
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from pfcm.core.schema import ImageTensor
from pfcm.core.service import (
    derive_seed,
    format_value,
    validate_run_config,
)
from pfcm.evaluation.schema import (
    GridCell,
    GridSearchResult,
    ImageMetrics,
    MetricsReport,
    SweepRow,
)
from pfcm.field.repository import save_checkpoint
from pfcm.field.service import (
    DenoiserBase,
    check_stage,
    condition_on,
    f_apply,
    model_device,
)
from pfcm.phantoms.schema import PairedSample
from pfcm.sample.schema import SamplerName, TaskSamplerConfig
from pfcm.sample.service import regularize, run_sampler, schedule_for
from pfcm.settings import Settings
from pfcm.train.repository import final_checkpoint_path
from pfcm.train.schema import DistillConfig
from pfcm.train.service import distill, get_metric, pretrain

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
ABLATION_SAMPLERS: tuple[SamplerName, ...] = (
    'vanilla', 'hijack', 'reg', 'task',
)


def _as_array(img: ImageTensor) -> np.ndarray:
    return img.detach().cpu().double().numpy()


def _check_shapes(a: ImageTensor, b: ImageTensor) -> None:
    if a.shape != b.shape:
        raise ValueError(
            f'shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}'
        )


def psnr(a: ImageTensor, b: ImageTensor, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE) in dB; +inf for identical images."""
    _check_shapes(a, b)
    if data_range <= 0:
        raise ValueError('data_range must be positive')
    a, b = _as_array(a), _as_array(b)
    if np.array_equal(a, b):
        return math.inf
    return float(peak_signal_noise_ratio(a, b, data_range=data_range))


def ssim(a: ImageTensor, b: ImageTensor) -> float:
    """Mean SSIM, 11 x 11 Gaussian window (std 1.5), K1 0.01, K2 0.03."""
    _check_shapes(a, b)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(
            f'image {tuple(a.shape)} smaller than the {SSIM_WINDOW}px window'
        )
    return float(
        structural_similarity(
            _as_array(a),
            _as_array(b),
            data_range=1.0,
            win_size=SSIM_WINDOW,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        )
    )


def _perceptual(name: str, a: ImageTensor, b: ImageTensor) -> float:
    metric = get_metric(name)
    with torch.no_grad():
        return float(metric(a[None, None], b[None, None])[0])


def image_metrics(
    image_id: int,
    sampler: str,
    output: ImageTensor,
    clean: ImageTensor,
    nfe: int,
    perceptual: str | None = None,
) -> ImageMetrics:
    return ImageMetrics(
        image_id=image_id,
        sampler=sampler,
        psnr=psnr(output, clean),
        ssim=ssim(output, clean),
        perceptual=(
            _perceptual(perceptual, output, clean) if perceptual else None
        ),
        nfe=nfe,
    )


def evaluate_sampler(
    model: DenoiserBase,
    valset: Sequence[PairedSample],
    sampler: SamplerName,
    seed: int,
    cfg: TaskSamplerConfig | None = None,
    perceptual: str | None = None,
) -> tuple[MetricsReport, list[ImageTensor]]:
    """Runs one sampler over the validation set.

    Image k always uses the seed stream derive_seed(seed, k), so different
    samplers see the same prior draws.
    """
    if not valset:
        raise ValueError('the validation set is empty')
    device = model_device(model)
    rows, outputs = [], []
    for k, sample in enumerate(valset):
        report = run_sampler(
            sampler, model, sample.noisy.to(device), derive_seed(seed, k), cfg
        )
        output = report.output.cpu()
        outputs.append(output)
        rows.append(
            image_metrics(
                k, sampler, output, sample.clean, report.nfe,
                perceptual,
            )
        )
    config = cfg.model_dump(exclude_none=True) if cfg else {}
    report = MetricsReport.from_rows(sampler, rows, config)
    logger.info(
        'sampler=%s psnr=%.3f ssim=%.4f nfe=%d',
        sampler, report.psnr_mean, report.ssim_mean, report.nfe,
    )
    return report, outputs


def _mean_over(fn, outputs, cleans) -> float:
    return float(np.mean([fn(o, c) for o, c in zip(outputs, cleans)]))


def criterion_score(
    criterion: str,
    outputs: Sequence[ImageTensor],
    cleans: Sequence[ImageTensor],
) -> float:
    """Lower is better: -PSNR, -SSIM or a registered distance."""
    if criterion == 'psnr':
        return -_mean_over(psnr, outputs, cleans)
    if criterion == 'ssim':
        return -_mean_over(ssim, outputs, cleans)
    return _mean_over(
        lambda o, c: _perceptual(criterion, o, c), outputs, cleans
    )


def grid_search(
    theta: DenoiserBase,
    valset: Sequence[PairedSample],
    i_grid: Sequence[int],
    w_grid: Sequence[float],
    criterion: str = 'psnr',
) -> GridSearchResult:
    """Exhaustive search over hijack index and mixing weight.

    The hijacked denoise f(y, sigma_hat, y) is computed once per index and
    mixed for every w. Ties go to the smaller index, then the larger w.

    Raises:
        ValueError: empty grid or validation set
    """
    if not valset:
        raise ValueError('the validation set is empty')
    if not i_grid or not w_grid:
        raise ValueError('both grids must be non-empty')
    check_stage(theta, 'pfcm')
    if criterion not in {'psnr', 'ssim'}:
        get_metric(criterion)
    theta.eval()
    sched = schedule_for(theta.meta)
    cleans = [s.clean for s in valset]
    device = model_device(theta)
    inputs = [s.noisy.to(device) for s in valset]

    cells = []
    for i in sorted(set(i_grid)):
        sigma_hat = TaskSamplerConfig(hijack_index=i).resolve_sigma(sched)
        with torch.no_grad():
            denoised = [
                f_apply(theta, y, sigma_hat, condition_on(theta, y)).cpu()
                for y in inputs
            ]
        for w in sorted(set(w_grid)):
            outputs = [
                regularize(x_hat, s.noisy, w)
                for x_hat, s in zip(denoised, valset)
            ]
            cells.append(
                GridCell(
                    hijack_index=i,
                    sigma_hat=sigma_hat,
                    w=w,
                    psnr_mean=_mean_over(psnr, outputs, cleans),
                    ssim_mean=_mean_over(ssim, outputs, cleans),
                    score=criterion_score(criterion, outputs, cleans),
                )
            )

    best = min(cells, key=lambda c: (c.score, c.hijack_index, -c.w))
    logger.info(
        'best i=%d w=%g score=%.4g', best.hijack_index, best.w, best.score
    )
    return GridSearchResult(
        criterion=criterion,
        best=TaskSamplerConfig(hijack_index=best.hijack_index, w=best.w),
        cells=cells,
    )


def ablation(
    theta: DenoiserBase,
    valset: Sequence[PairedSample],
    cfg: TaskSamplerConfig,
    seed: int,
    perceptual: str | None = None,
) -> dict[str, MetricsReport]:
    """vanilla, +hijack, +regularization and +hijack+regularization."""
    check_stage(theta, 'pfcm')
    return {
        name: evaluate_sampler(theta, valset, name, seed, cfg, perceptual)[0]
        for name in ABLATION_SAMPLERS
    }


def compare(
    phi: DenoiserBase,
    theta: DenoiserBase,
    valset: Sequence[PairedSample],
    cfg: TaskSamplerConfig,
    seed: int,
    perceptual: str | None = None,
) -> dict[str, MetricsReport]:
    """Noisy input, multi-step Heun on phi, one-step samplers on theta."""
    check_stage(phi, 'pfgmpp')
    check_stage(theta, 'pfcm')
    runs: list[tuple[str, DenoiserBase, SamplerName]] = [
        ('input', theta, 'input'),
        ('heun', phi, 'heun'),
        ('vanilla', theta, 'vanilla'),
        ('task', theta, 'task'),
    ]
    return {
        label: evaluate_sampler(model, valset, name, seed, cfg, perceptual)[0]
        for label, model, name in runs
    }


def hijack_degradation(reports: dict[str, MetricsReport]) -> float:
    """PSNR lost by hijack-only sampling relative to vanilla sampling."""
    return reports['vanilla'].psnr_mean - reports['hijack'].psnr_mean


def degradation_sweep(
    trainset: Sequence[PairedSample],
    valset: Sequence[PairedSample],
    config: DistillConfig,
    d_values: Sequence[float],
    cfg: TaskSamplerConfig,
    settings: Settings | None = None,
    out_dir: Path | None = None,
    perceptual: str | None = None,
) -> list[SweepRow]:
    """Pretrains, distills and ablates one model per D.

    Every model shares ``config`` apart from D, so the rows isolate how the
    augmentation dimension changes robustness to hijacking. With ``out_dir``
    both checkpoints of each model go to ``<out_dir>/d_<D>/``.

    Raises:
        ValueError: no D values
        MetadataMismatchError: a D value outside (2, inf]
    """
    if not d_values:
        raise ValueError('the sweep needs at least one D')
    rows = []
    for D in d_values:
        run = validate_run_config({**config.run.model_dump(), 'd': D})
        phi, _ = pretrain(trainset, run, settings=settings)
        theta, _ = distill(
            phi, trainset, config.model_copy(update={'run': run}),
            settings=settings,
        )
        if out_dir is not None:
            model_dir = Path(out_dir) / f'd_{format_value(D)}'
            save_checkpoint(final_checkpoint_path(model_dir, 'pfgmpp'), phi)
            save_checkpoint(final_checkpoint_path(model_dir, 'pfcm'), theta)

        reports = ablation(theta, valset, cfg, run.seed, perceptual)
        rows.append(SweepRow.from_reports(D, reports))
        logger.info(
            'D=%g task psnr=%.3f hijack degradation=%.3f dB',
            D, rows[-1].task_psnr, rows[-1].hijack_degradation,
        )
    return rows
