from __future__ import annotations

from datetime import datetime

from sqlalchemy import JSON, func
from sqlalchemy.orm import Mapped, mapped_column, registry

table_registry = registry()


@table_registry.mapped_as_dataclass
class RunRecord:
    """One CLI invocation. Rows are only ever inserted."""

    __tablename__ = 'runs'

    id: Mapped[int] = mapped_column(init=False, primary_key=True)
    command: Mapped[str]
    seed: Mapped[int | None]
    out_dir: Mapped[str]
    exit_code: Mapped[int]
    manifest_path: Mapped[str]
    config: Mapped[dict] = mapped_column(JSON)
    artifact_hashes: Mapped[dict] = mapped_column(JSON)
    wallclock_s: Mapped[float]
    created_at: Mapped[datetime] = mapped_column(
        init=False, server_default=func.now()
    )
