import argparse
import json
import logging
from pathlib import Path

from pfcm.cli.schema import CommandResult
from pfcm.cli.service import run_config
from pfcm.field.repository import load_checkpoint
from pfcm.phantoms.repository import load_image, save_image
from pfcm.sample.schema import TaskSamplerConfig
from pfcm.sample.service import run_sampler
from pfcm.settings import Settings

logger = logging.getLogger(__name__)

SAMPLERS = ('vanilla', 'task', 'heun', 'hijack', 'reg')


def register(
    subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser
) -> None:
    parser = subparsers.add_parser(
        'denoise', parents=[common], help='denoise one low-dose image'
    )
    parser.add_argument(
        '--input', type=Path, required=True, help='image (.f32 + .json)'
    )
    parser.add_argument('--checkpoint', type=Path, required=True)
    parser.add_argument('--sampler', choices=SAMPLERS, default='task')
    parser.add_argument('--w', type=float, default=1.0)
    level = parser.add_mutually_exclusive_group()
    level.add_argument('--i', type=int, dest='hijack_index')
    level.add_argument('--sigma-hat', type=float)
    parser.set_defaults(handler=denoise_command)


def task_config(args: argparse.Namespace) -> TaskSamplerConfig:
    return TaskSamplerConfig(
        hijack_index=args.hijack_index, sigma_hat=args.sigma_hat, w=args.w
    )


def denoise_command(
    args: argparse.Namespace, settings: Settings
) -> CommandResult:
    seed = run_config(args, settings).seed
    stage = 'pfgmpp' if args.sampler == 'heun' else 'pfcm'
    model = load_checkpoint(args.checkpoint, stage, device=settings.DEVICE)
    y, sidecar = load_image(args.input)

    cfg = task_config(args)
    report = run_sampler(
        args.sampler, model, y.to(settings.DEVICE), seed, cfg
    )
    args.out.mkdir(parents=True, exist_ok=True)
    image = save_image(
        args.out / 'denoised',
        report.output.cpu(),
        sidecar.model_copy(update={'role': 'denoised', 'seed': seed}),
    )
    report_path = args.out / 'sample_report.json'
    report_path.write_text(
        json.dumps(report.summary(), indent=2), encoding='utf-8'
    )
    logger.info('sampler=%s nfe=%d -> %s', args.sampler, report.nfe, image)

    return CommandResult(
        outputs={'image': image, 'report': report_path},
        inputs={'image': args.input, 'checkpoint': args.checkpoint},
        config={
            'sampler': args.sampler,
            **cfg.model_dump(exclude_none=True),
        },
        seed=seed,
    )
