import argparse
import hashlib
import json
import logging
import re
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from pfcm.cli.schema import CommandResult, RunManifest
from pfcm.core.schema import RunConfig
from pfcm.core.service import load_run_config
from pfcm.database import get_session, registry_url
from pfcm.exceptions import ExitCode, PFCMError, UsageError
from pfcm.field.repository import checkpoint_digest
from pfcm.model.models import RunRecord
from pfcm.settings import Settings

logger = logging.getLogger(__name__)

MANIFEST_DIR = 'manifests'
UNEXPECTED_FAILURE = 1


class CommandParser(argparse.ArgumentParser):
    """Raises UsageError on bad arguments instead of exiting."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def common_parser() -> argparse.ArgumentParser:
    """Flags shared by every subcommand."""
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument(
        '--out', type=Path, required=True, help='output directory'
    )
    parser.add_argument(
        '--config', type=Path, help='key=value run configuration file'
    )
    parser.add_argument('--seed', type=int, help='overrides PFCM_SEED')
    parser.add_argument('--log-level', help='overrides PFCM_LOG_LEVEL')
    return parser


def run_config(
    args: argparse.Namespace, settings: Settings, **flags: object
) -> RunConfig:
    """flag > PFCM_* environment > config file > default."""
    return load_run_config(
        args.config, {'seed': args.seed, **flags}, settings
    )


def _file_hash(path: Path) -> str:
    if path.suffix == '.pt':
        return checkpoint_digest(path)
    if path.suffix == '.csv':
        frame = pd.read_csv(path)
        if 'wallclock' in frame.columns:
            frame = frame.drop(columns='wallclock')
            return hashlib.sha256(
                frame.to_csv(index=False).encode()
            ).hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


def artifact_hash(path: Path) -> str:
    """Content hash of an output file or directory, wallclock excluded."""
    path = Path(path)
    if path.is_dir():
        digest = hashlib.sha256()
        for child in sorted(p for p in path.rglob('*') if p.is_file()):
            digest.update(str(child.relative_to(path)).encode())
            digest.update(_file_hash(child).encode())
        return digest.hexdigest()
    return _file_hash(path)


def artifact_versions() -> dict[str, str]:
    try:
        version = metadata.version('pfcm')
    except metadata.PackageNotFoundError:
        version = 'unknown'
    return {
        'pfcm': version,
        'torch': torch.__version__,
        'numpy': np.__version__,
    }


def write_manifest(out_dir: Path, manifest: RunManifest) -> Path:
    """Adds a new manifest file; existing manifests are never touched."""
    directory = Path(out_dir) / MANIFEST_DIR
    directory.mkdir(parents=True, exist_ok=True)
    index = len(list(directory.glob('*.json'))) + 1
    while True:
        path = directory / f'{index:04d}_{manifest.command}.json'
        try:
            with path.open('x', encoding='utf-8') as f:
                f.write(json.dumps(manifest.model_dump(), indent=2))
            return path
        except FileExistsError:
            index += 1


def record_run(
    out_dir: Path,
    manifest: RunManifest,
    manifest_path: Path,
    settings: Settings,
) -> None:
    with get_session(registry_url(out_dir, settings.REGISTRY_URL)) as session:
        session.add(
            RunRecord(
                command=manifest.command,
                seed=manifest.seed,
                out_dir=str(out_dir),
                exit_code=manifest.exit_code,
                manifest_path=str(manifest_path),
                config=manifest.config,
                artifact_hashes=manifest.artifact_hashes,
                wallclock_s=manifest.wallclock_s,
            )
        )
        session.commit()


def _manifest(
    args: argparse.Namespace,
    argv: list[str],
    result: CommandResult,
    exit_code: int,
    diagnostic: str | None,
    wallclock: float,
) -> RunManifest:
    outputs = {k: Path(v) for k, v in result.outputs.items()}
    return RunManifest(
        command=args.command,
        argv=argv,
        config=result.config,
        seed=result.seed,
        inputs={k: str(v) for k, v in result.inputs.items()},
        outputs={k: str(v) for k, v in outputs.items()},
        artifact_hashes={
            k: artifact_hash(v) for k, v in outputs.items() if v.exists()
        },
        versions=artifact_versions(),
        exit_code=exit_code,
        diagnostic=diagnostic,
        wallclock_s=wallclock,
    )


def execute(
    args: argparse.Namespace, argv: list[str], settings: Settings
) -> int:
    """Runs the selected handler and writes exactly one manifest.

    ValueError maps to the usage exit code, PFCMError to its own code.
    """
    start = time.perf_counter()
    result = CommandResult()
    exit_code, diagnostic = ExitCode.OK, None
    unexpected = None
    try:
        result = args.handler(args, settings)
    except PFCMError as e:
        exit_code, diagnostic = e.exit_code, e.detail
    except ValueError as e:
        exit_code, diagnostic = ExitCode.USAGE, str(e)
    except OSError as e:
        exit_code, diagnostic = ExitCode.IO_ERROR, str(e)
    except Exception as e:
        logger.exception('%s failed', args.command)
        exit_code, diagnostic, unexpected = UNEXPECTED_FAILURE, repr(e), e

    if diagnostic is not None and unexpected is None:
        logger.error('%s: %s', args.command, diagnostic)

    manifest = _manifest(
        args, argv, result, int(exit_code), diagnostic,
        time.perf_counter() - start,
    )
    path = write_manifest(args.out, manifest)
    record_run(args.out, manifest, path, settings)
    logger.info('manifest %s exit=%d', path, int(exit_code))

    if unexpected is not None:
        raise unexpected
    return int(exit_code)


def reject_usage(argv: list[str], detail: str, settings: Settings) -> int:
    """Manifest for a command line the parser refused.

    Nothing is written when no ``--out`` can be recovered from argv.
    """
    logger.error('usage: %s', detail)
    locator = argparse.ArgumentParser(add_help=False, exit_on_error=False)
    locator.add_argument('--out', type=Path)
    try:
        out = locator.parse_known_args(argv)[0].out
    except argparse.ArgumentError:
        out = None
    if out is None:
        return int(ExitCode.USAGE)

    head = argv[0] if argv else ''
    manifest = RunManifest(
        command=head if re.fullmatch(r'[a-z][a-z-]*', head) else 'pfcm',
        argv=argv,
        config={},
        versions=artifact_versions(),
        exit_code=int(ExitCode.USAGE),
        diagnostic=detail,
        wallclock_s=0.0,
    )
    path = write_manifest(out, manifest)
    record_run(out, manifest, path, settings)
    return int(ExitCode.USAGE)


# RunConfig keys settable from the command line, with their flag types
RUN_FLAGS: dict[str, type] = {
    'd': float,
    'sigma_min': float,
    'sigma_max': float,
    'rho': float,
    'n_steps': int,
    'sigma_data': float,
    'lr': float,
    'iters': int,
    'batch': int,
    'dropout': float,
    'patch': int,
    'width': int,
    'levels': int,
    'optimizer': str,
    'loss_weighting': str,
    'conditioning': str,
    'checkpoint_every': int,
}


def add_run_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group('run configuration')
    for key, kind in RUN_FLAGS.items():
        flag = '--' + key.replace('_', '-')
        group.add_argument(flag, dest=key, type=kind)


def run_flags(args: argparse.Namespace) -> dict[str, object]:
    return {key: getattr(args, key, None) for key in RUN_FLAGS}
