import argparse
import logging
import math

from pfcm.cli.schema import CommandResult
from pfcm.cli.service import run_config
from pfcm.exceptions import UsageError
from pfcm.phantoms.repository import save_dataset
from pfcm.phantoms.schema import DoseModel, PhantomSpec
from pfcm.phantoms.service import generate_dataset
from pfcm.settings import Settings

logger = logging.getLogger(__name__)


def register(
    subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser
) -> None:
    parser = subparsers.add_parser(
        'phantom-gen',
        parents=[common],
        help='generate a paired clean / low-dose phantom dataset',
    )
    parser.add_argument('--n', type=int, default=64, help='image size')
    parser.add_argument('--count', type=int, default=32)
    parser.add_argument(
        '--dose', type=float, default=0.25,
        help='dose factor in (0, inf]; inf disables the noise',
    )
    parser.add_argument('--kernel-width', type=float, default=1.0)
    parser.add_argument('--reference-std', type=float, default=0.025)
    parser.add_argument(
        '--ellipses', type=int, nargs=2, default=(3, 6), metavar=('LO', 'HI')
    )
    parser.set_defaults(handler=phantom_gen)


def phantom_gen(args: argparse.Namespace, settings: Settings) -> CommandResult:
    config = run_config(args, settings)
    if args.count < 1:
        raise UsageError('--count must be at least 1')
    if not args.dose > 0 or math.isnan(args.dose):
        raise UsageError('--dose must be positive')

    spec = PhantomSpec(n=args.n, n_ellipses_range=tuple(args.ellipses))
    dose = DoseModel(
        dose_factor=args.dose,
        texture_kernel_width=args.kernel_width,
        reference_std=args.reference_std,
    )
    samples = generate_dataset(spec, dose, args.count, config.seed)
    data_dir = args.out / 'data'
    save_dataset(data_dir, samples, spec, dose)
    logger.info('wrote %d pairs to %s', len(samples), data_dir)

    return CommandResult(
        outputs={'dataset': data_dir},
        config={
            'seed': config.seed,
            'spec': spec.model_dump(),
            'dose': dose.model_dump(),
            'count': args.count,
        },
        seed=config.seed,
    )
