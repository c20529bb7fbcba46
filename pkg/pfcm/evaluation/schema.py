import numpy as np
from pydantic import BaseModel, model_validator

from pfcm.sample.schema import TaskSamplerConfig

AGGREGATE_TOLERANCE = 1e-9


class ImageMetrics(BaseModel):
    image_id: int
    sampler: str
    psnr: float
    ssim: float
    perceptual: float | None = None
    nfe: int


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    with np.errstate(invalid='ignore'):
        return float(arr.mean()), float(arr.std())


def _close(a: float | None, b: float | None) -> bool:
    if a is None or b is None:
        return a is b
    return bool(
        np.isclose(a, b, rtol=0, atol=AGGREGATE_TOLERANCE, equal_nan=True)
    )


class MetricsReport(BaseModel):
    """Per-image rows and their mean and (population) std aggregates."""

    sampler: str
    config: dict = {}
    rows: list[ImageMetrics]
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    perceptual_mean: float | None = None
    perceptual_std: float | None = None
    nfe: int

    @classmethod
    def from_rows(
        cls, sampler: str, rows: list[ImageMetrics], config: dict | None = None
    ) -> 'MetricsReport':
        return cls(
            sampler=sampler,
            config=config or {},
            rows=rows,
            **cls.aggregate(rows),
        )

    @staticmethod
    def aggregate(rows: list[ImageMetrics]) -> dict:
        if not rows:
            raise ValueError('a report needs at least one row')
        psnr_mean, psnr_std = _mean_std([r.psnr for r in rows])
        ssim_mean, ssim_std = _mean_std([r.ssim for r in rows])
        perceptual = [r.perceptual for r in rows if r.perceptual is not None]
        perceptual_mean = perceptual_std = None
        if perceptual:
            perceptual_mean, perceptual_std = _mean_std(perceptual)
        return {
            'psnr_mean': psnr_mean,
            'psnr_std': psnr_std,
            'ssim_mean': ssim_mean,
            'ssim_std': ssim_std,
            'perceptual_mean': perceptual_mean,
            'perceptual_std': perceptual_std,
            'nfe': max(r.nfe for r in rows),
        }

    @model_validator(mode='after')
    def check_aggregates(self):
        expected = self.aggregate(self.rows)
        mismatched = [
            key
            for key, value in expected.items()
            if not _close(getattr(self, key), value)
        ]
        if mismatched:
            raise ValueError(
                'aggregates differ from the rows: ' + ', '.join(mismatched)
            )
        return self


class GridCell(BaseModel):
    hijack_index: int
    sigma_hat: float
    w: float
    psnr_mean: float
    ssim_mean: float
    score: float


class GridSearchResult(BaseModel):
    criterion: str
    best: TaskSamplerConfig
    cells: list[GridCell]


class SweepRow(BaseModel):
    """Ablation PSNRs of one model trained and distilled at augmentation D."""

    D: float
    vanilla_psnr: float
    hijack_psnr: float
    reg_psnr: float
    task_psnr: float
    hijack_degradation: float

    @classmethod
    def from_reports(
        cls, D: float, reports: dict[str, MetricsReport]
    ) -> 'SweepRow':
        psnr = {name: report.psnr_mean for name, report in reports.items()}
        return cls(
            D=D,
            vanilla_psnr=psnr['vanilla'],
            hijack_psnr=psnr['hijack'],
            reg_psnr=psnr['reg'],
            task_psnr=psnr['task'],
            hijack_degradation=psnr['vanilla'] - psnr['hijack'],
        )
