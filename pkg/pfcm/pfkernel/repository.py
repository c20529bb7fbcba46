from pathlib import Path

import numpy as np

from pfcm.exceptions import ArtifactIOError
from pfcm.pfkernel.schema import CdfTableHeader
from pfcm.pfkernel.service import radius_cdf


def cdf_table_path(cache_dir: Path, r: float, N: int, D: float) -> Path:
    name = f'radius_cdf_r{r:.9g}_N{N}_D{D:.9g}'.replace('.', 'p')
    return Path(cache_dir) / name


def save_cdf_table(
    path: Path, header: CdfTableHeader, grid: np.ndarray, cdf: np.ndarray
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.stack([grid, cdf]).astype('<f8').tofile(path.with_suffix('.f64'))
    path.with_suffix('.json').write_text(
        header.model_dump_json(indent=2), encoding='utf-8'
    )


def load_cdf_table(path: Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    try:
        header = CdfTableHeader.model_validate_json(
            path.with_suffix('.json').read_text(encoding='utf-8')
        )
        data = np.fromfile(path.with_suffix('.f64'), dtype='<f8')
    except FileNotFoundError as e:
        raise ArtifactIOError(f'missing CDF table {path}') from e
    if data.size != 2 * header.n_points:
        raise ArtifactIOError(f'corrupt CDF table {path}')
    grid, cdf = data.reshape(2, header.n_points)
    return grid, cdf


def cached_radius_cdf(
    cache_dir: Path, r: float, N: int, D: float, n_points: int = 200_001
) -> tuple[np.ndarray, np.ndarray]:
    """Oracle CDF of the radial law, computed once per (r, N, D)."""
    path = cdf_table_path(cache_dir, r, N, D)
    if path.with_suffix('.json').exists():
        return load_cdf_table(path)
    grid, cdf = radius_cdf(r, N, D, n_points)
    save_cdf_table(
        path, CdfTableHeader(r=r, N=N, D=D, n_points=n_points), grid, cdf
    )
    return grid, cdf
