import argparse
import logging
from pathlib import Path

from pfcm.cli.schema import CommandResult
from pfcm.cli.service import add_run_flags, run_config, run_flags
from pfcm.core.service import dump_run_config
from pfcm.field.repository import load_checkpoint, save_checkpoint
from pfcm.phantoms.repository import load_dataset
from pfcm.settings import Settings
from pfcm.train.repository import final_checkpoint_path, write_loss_trace
from pfcm.train.schema import DistillConfig
from pfcm.train.service import distill, pretrain

logger = logging.getLogger(__name__)


def register(
    subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser
) -> None:
    parser = subparsers.add_parser(
        'pretrain', parents=[common], help='train the PFGM++ field'
    )
    parser.add_argument('--data', type=Path, required=True)
    parser.add_argument('--resume', type=Path, help='checkpoint to resume')
    add_run_flags(parser)
    parser.set_defaults(handler=pretrain_command)

    parser = subparsers.add_parser(
        'distill',
        parents=[common],
        help='distill a pretrained field into a PFCM',
    )
    parser.add_argument('--data', type=Path, required=True)
    parser.add_argument(
        '--teacher', type=Path, required=True, help='pfgmpp checkpoint'
    )
    parser.add_argument('--resume', type=Path, help='checkpoint to resume')
    parser.add_argument('--mu', type=float, default=0.95, help='EMA decay')
    parser.add_argument(
        '--metric', default='pseudo_huber', help='l2, pseudo_huber or any '
        'registered distance',
    )
    parser.add_argument(
        '--gap-every', type=int, default=0,
        help='track the consistency gap every K iterations',
    )
    add_run_flags(parser)
    parser.set_defaults(handler=distill_command)


def _write_outputs(
    out: Path, stage: str, model, trace, config
) -> dict[str, Path]:
    checkpoint = final_checkpoint_path(out, stage)
    save_checkpoint(checkpoint, model)
    trace_path = write_loss_trace(out / f'{stage}_loss.csv', trace)
    config_path = out / f'{stage}_config.env'
    dump_run_config(config, config_path)
    return {
        'checkpoint': checkpoint,
        'loss_trace': trace_path,
        'config': config_path,
    }


def pretrain_command(
    args: argparse.Namespace, settings: Settings
) -> CommandResult:
    config = run_config(args, settings, **run_flags(args))
    samples = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)

    phi, trace = pretrain(
        samples, config, out_dir=args.out, resume=args.resume,
        settings=settings,
    )
    if trace:
        logger.info(
            'pretrain done iters=%d loss=%.4g', len(trace), trace[-1].loss
        )
    return CommandResult(
        outputs=_write_outputs(args.out, 'pfgmpp', phi, trace, config),
        inputs={'data': args.data},
        config=config.model_dump(),
        seed=config.seed,
    )


def distill_command(
    args: argparse.Namespace, settings: Settings
) -> CommandResult:
    config = DistillConfig(
        run=run_config(args, settings, **run_flags(args)),
        mu=args.mu,
        metric=args.metric,
        gap_every=args.gap_every,
        **({} if args.lr is None else {'lr': args.lr}),
    )
    phi = load_checkpoint(args.teacher, 'pfgmpp', device=settings.DEVICE)
    samples = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)

    theta, trace = distill(
        phi, samples, config, out_dir=args.out, resume=args.resume,
        settings=settings,
    )
    return CommandResult(
        outputs=_write_outputs(args.out, 'pfcm', theta, trace, config.run),
        inputs={'data': args.data, 'teacher': args.teacher},
        config=config.model_dump(),
        seed=config.run.seed,
    )
