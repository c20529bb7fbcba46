import json
from pathlib import Path

import pandas as pd

from pfcm.core.schema import ImageTensor
from pfcm.evaluation.schema import GridSearchResult, MetricsReport, SweepRow
from pfcm.exceptions import ArtifactIOError
from pfcm.phantoms.repository import save_image
from pfcm.phantoms.schema import ImageSidecar


def write_reports_csv(
    path: Path, reports: dict[str, MetricsReport]
) -> Path:
    """One row per image per sampler configuration."""
    rows = [
        {'label': label, **row.model_dump(), **report.config}
        for label, report in reports.items()
        for row in report.rows
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, index=False, float_format='%.17g')
    return path


def write_summary(path: Path, reports: dict[str, MetricsReport]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {label: report.model_dump() for label, report in reports.items()}
    path.write_text(json.dumps(payload, indent=2), encoding='utf-8')
    return path


def load_summary(path: Path) -> dict[str, MetricsReport]:
    """Parses a summary and re-checks every aggregate against its rows.

    Raises:
        ArtifactIOError: missing file or aggregates that do not match
    """
    try:
        payload = json.loads(Path(path).read_text(encoding='utf-8'))
        return {
            label: MetricsReport.model_validate(report)
            for label, report in payload.items()
        }
    except FileNotFoundError as e:
        raise ArtifactIOError(f'missing report {path}') from e
    except ValueError as e:
        raise ArtifactIOError(f'invalid report {path}: {e}') from e


def write_grid(out_dir: Path, result: GridSearchResult) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / 'grid.csv'
    pd.DataFrame([cell.model_dump() for cell in result.cells]).to_csv(
        table, index=False, float_format='%.17g'
    )
    best = out_dir / 'grid_best.json'
    best.write_text(
        json.dumps(
            {'criterion': result.criterion, **result.best.model_dump()},
            indent=2,
        ),
        encoding='utf-8',
    )
    return table, best


def dump_diff(
    out_dir: Path, label: str, image_id: int, output: ImageTensor,
    clean: ImageTensor,
) -> Path:
    """Writes |x_hat - x| in the phantom image format."""
    pair_id = f'{image_id:05d}'
    return save_image(
        Path(out_dir) / 'diff' / f'{label}_{pair_id}',
        (output - clean).abs(),
        ImageSidecar(n=output.shape[-1], role='diff', pair_id=pair_id),
    )


def write_sweep(path: Path, rows: list[SweepRow]) -> Path:
    """Hijack degradation per D, one row per trained model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([row.model_dump() for row in rows]).to_csv(
        path, index=False, float_format='%.17g'
    )
    return path


def read_sweep(path: Path) -> list[SweepRow]:
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError as e:
        raise ArtifactIOError(f'missing sweep table {path}') from e
    return [SweepRow.model_validate(r) for r in frame.to_dict('records')]
