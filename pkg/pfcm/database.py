from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path

from sqlalchemy import Engine, create_engine
from sqlalchemy.orm import Session

from pfcm.model.models import table_registry


def registry_url(out_dir: Path, url: str | None = None) -> str:
    if url:
        return url
    return f'sqlite:///{Path(out_dir) / "runs.db"}'


def get_engine(url: str) -> Engine:
    engine = create_engine(url)
    table_registry.metadata.create_all(engine)
    return engine


@contextmanager
def get_session(url: str) -> Iterator[Session]:
    engine = get_engine(url)
    try:
        with Session(engine) as session:
            yield session
    finally:
        engine.dispose()
