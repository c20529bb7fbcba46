import argparse
import json
import logging
import math
from pathlib import Path

from pfcm.cli.schema import CommandResult
from pfcm.cli.service import add_run_flags, run_config, run_flags
from pfcm.evaluation.repository import (
    dump_diff,
    write_grid,
    write_reports_csv,
    write_summary,
    write_sweep,
)
from pfcm.evaluation.service import (
    ablation,
    compare,
    degradation_sweep,
    evaluate_sampler,
    grid_search,
    hijack_degradation,
)
from pfcm.field.repository import load_checkpoint
from pfcm.phantoms.repository import load_dataset
from pfcm.sample.commands import task_config
from pfcm.settings import Settings
from pfcm.train.schema import DistillConfig

logger = logging.getLogger(__name__)

DEFAULT_I_GRID = list(range(30, 41))
DEFAULT_W_GRID = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
DEFAULT_D_VALUES = [128.0, 2048.0, 262144.0, math.inf]


def _add_level(parser: argparse.ArgumentParser, required: bool) -> None:
    parser.add_argument('--w', type=float, default=1.0)
    level = parser.add_mutually_exclusive_group(required=required)
    level.add_argument('--i', type=int, dest='hijack_index')
    level.add_argument('--sigma-hat', type=float)


def register(
    subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser
) -> None:
    parser = subparsers.add_parser(
        'gridsearch', parents=[common], help='search (i, w) on a valset'
    )
    parser.add_argument('--checkpoint', type=Path, required=True)
    parser.add_argument('--data', type=Path, required=True)
    parser.add_argument(
        '--i-grid', type=int, nargs='+', default=DEFAULT_I_GRID
    )
    parser.add_argument(
        '--w-grid', type=float, nargs='+', default=DEFAULT_W_GRID
    )
    parser.add_argument(
        '--criterion', default='psnr',
        help='psnr, ssim or a registered distance',
    )
    parser.set_defaults(handler=gridsearch_command)

    parser = subparsers.add_parser(
        'evaluate', parents=[common], help='PSNR / SSIM of one sampler'
    )
    parser.add_argument('--checkpoint', type=Path, required=True)
    parser.add_argument('--data', type=Path, required=True)
    parser.add_argument(
        '--sampler',
        choices=('vanilla', 'task', 'heun', 'hijack', 'reg', 'input'),
        default='task',
    )
    _add_level(parser, required=False)
    parser.add_argument(
        '--criterion', dest='perceptual',
        help='registered distance reported next to PSNR and SSIM',
    )
    parser.add_argument(
        '--dump-diff', action='store_true', help='write |x_hat - x| images'
    )
    parser.set_defaults(handler=evaluate_command)

    parser = subparsers.add_parser(
        'ablate', parents=[common], help='hijack / regularization ablation'
    )
    parser.add_argument('--checkpoint', type=Path, required=True)
    parser.add_argument('--data', type=Path, required=True)
    _add_level(parser, required=True)
    parser.add_argument('--criterion', dest='perceptual')
    parser.set_defaults(handler=ablate_command)

    parser = subparsers.add_parser(
        'compare', parents=[common],
        help='multi-step pretrained field against one-step samplers',
    )
    parser.add_argument(
        '--teacher', type=Path, required=True, help='pfgmpp checkpoint'
    )
    parser.add_argument(
        '--student', type=Path, required=True, help='pfcm checkpoint'
    )
    parser.add_argument('--data', type=Path, required=True)
    _add_level(parser, required=True)
    parser.add_argument('--criterion', dest='perceptual')
    parser.set_defaults(handler=compare_command)

    parser = subparsers.add_parser(
        'sweep', parents=[common],
        help='train, distill and ablate one model per D',
    )
    parser.add_argument('--data', type=Path, required=True)
    parser.add_argument('--valset', type=Path, required=True)
    parser.add_argument(
        '--d-values', type=float, nargs='+', default=DEFAULT_D_VALUES,
        help='augmentation dimensions, inf for the Gaussian limit',
    )
    _add_level(parser, required=True)
    parser.add_argument('--mu', type=float, default=0.95)
    parser.add_argument('--metric', default='pseudo_huber')
    parser.add_argument(
        '--distill-lr', type=float, help='defaults to 1e-5'
    )
    parser.add_argument('--criterion', dest='perceptual')
    add_run_flags(parser)
    parser.set_defaults(handler=sweep_command)


def _write_reports(out: Path, name: str, reports: dict) -> dict[str, Path]:
    return {
        'table': write_reports_csv(out / f'{name}.csv', reports),
        'summary': write_summary(out / f'{name}_summary.json', reports),
    }


def gridsearch_command(
    args: argparse.Namespace, settings: Settings
) -> CommandResult:
    theta = load_checkpoint(args.checkpoint, 'pfcm', device=settings.DEVICE)
    valset = load_dataset(args.data)
    result = grid_search(
        theta, valset, args.i_grid, args.w_grid, args.criterion
    )
    table, best = write_grid(args.out, result)
    return CommandResult(
        outputs={'grid': table, 'best': best},
        inputs={'checkpoint': args.checkpoint, 'data': args.data},
        config={
            'i_grid': args.i_grid,
            'w_grid': args.w_grid,
            'criterion': args.criterion,
        },
    )


def evaluate_command(
    args: argparse.Namespace, settings: Settings
) -> CommandResult:
    seed = run_config(args, settings).seed
    stage = 'pfgmpp' if args.sampler == 'heun' else 'pfcm'
    model = load_checkpoint(args.checkpoint, stage, device=settings.DEVICE)
    valset = load_dataset(args.data)
    cfg = task_config(args)

    report, outputs = evaluate_sampler(
        model, valset, args.sampler, seed, cfg, args.perceptual
    )
    args.out.mkdir(parents=True, exist_ok=True)
    written = _write_reports(args.out, 'evaluate', {args.sampler: report})
    if args.dump_diff:
        for k, (output, sample) in enumerate(zip(outputs, valset)):
            dump_diff(args.out, args.sampler, k, output.cpu(), sample.clean)
        written['diff'] = args.out / 'diff'

    return CommandResult(
        outputs=written,
        inputs={'checkpoint': args.checkpoint, 'data': args.data},
        config={'sampler': args.sampler, **report.config},
        seed=seed,
    )


def ablate_command(
    args: argparse.Namespace, settings: Settings
) -> CommandResult:
    seed = run_config(args, settings).seed
    theta = load_checkpoint(args.checkpoint, 'pfcm', device=settings.DEVICE)
    valset = load_dataset(args.data)
    cfg = task_config(args)

    reports = ablation(theta, valset, cfg, seed, args.perceptual)
    args.out.mkdir(parents=True, exist_ok=True)
    written = _write_reports(args.out, 'ablation', reports)
    logger.info('hijack degradation %.3f dB', hijack_degradation(reports))

    return CommandResult(
        outputs=written,
        inputs={'checkpoint': args.checkpoint, 'data': args.data},
        config=cfg.model_dump(exclude_none=True),
        seed=seed,
    )


def compare_command(
    args: argparse.Namespace, settings: Settings
) -> CommandResult:
    seed = run_config(args, settings).seed
    phi = load_checkpoint(args.teacher, 'pfgmpp', device=settings.DEVICE)
    theta = load_checkpoint(args.student, 'pfcm', device=settings.DEVICE)
    valset = load_dataset(args.data)
    cfg = task_config(args)

    reports = compare(phi, theta, valset, cfg, seed, args.perceptual)
    args.out.mkdir(parents=True, exist_ok=True)
    written = _write_reports(args.out, 'compare', reports)
    nfe_path = args.out / 'compare_nfe.json'
    nfe_path.write_text(
        json.dumps({k: r.nfe for k, r in reports.items()}, indent=2),
        encoding='utf-8',
    )
    written['nfe'] = nfe_path

    return CommandResult(
        outputs=written,
        inputs={
            'teacher': args.teacher,
            'student': args.student,
            'data': args.data,
        },
        config=cfg.model_dump(exclude_none=True),
        seed=seed,
    )


def sweep_command(
    args: argparse.Namespace, settings: Settings
) -> CommandResult:
    config = DistillConfig(
        run=run_config(args, settings, **run_flags(args)),
        mu=args.mu,
        metric=args.metric,
        **({} if args.distill_lr is None else {'lr': args.distill_lr}),
    )
    trainset = load_dataset(args.data)
    valset = load_dataset(args.valset)
    cfg = task_config(args)

    rows = degradation_sweep(
        trainset, valset, config, args.d_values, cfg, settings, args.out,
        args.perceptual,
    )
    table = write_sweep(args.out / 'sweep.csv', rows)

    return CommandResult(
        outputs={'table': table},
        inputs={'data': args.data, 'valset': args.valset},
        config={
            **config.model_dump(),
            'd_values': args.d_values,
            **cfg.model_dump(exclude_none=True),
        },
        seed=config.run.seed,
    )
