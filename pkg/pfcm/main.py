import argparse
import sys

from pfcm.cli.service import (
    CommandParser,
    common_parser,
    execute,
    reject_usage,
)
from pfcm.evaluation import commands as evaluation
from pfcm.exceptions import UsageError
from pfcm.phantoms import commands as phantoms
from pfcm.sample import commands as sample
from pfcm.settings import Settings, configure_logging
from pfcm.train import commands as train


def build_parser() -> argparse.ArgumentParser:
    parser = CommandParser(
        prog='pfcm',
        description='Poisson flow consistency models for low-dose denoising',
    )
    subparsers = parser.add_subparsers(dest='command', required=True)
    common = common_parser()

    phantoms.register(subparsers, common)
    train.register(subparsers, common)
    sample.register(subparsers, common)
    evaluation.register(subparsers, common)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    settings = Settings()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        configure_logging(settings.LOG_LEVEL.upper())
        return reject_usage(argv, e.detail, settings)
    except SystemExit as e:
        # --help and --version
        return e.code if isinstance(e.code, int) else 0

    configure_logging((args.log_level or settings.LOG_LEVEL).upper())
    return execute(args, argv, settings)


def run() -> None:
    sys.exit(main())
