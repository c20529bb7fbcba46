import logging

from pydantic_settings import BaseSettings, SettingsConfigDict

LOG_FORMAT = '%(levelname)-5.5s [%(name)s] %(message)s'


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix='PFCM_', env_file='.env', env_file_encoding='utf-8',
        extra='ignore',
    )

    SEED: int | None = None
    DEVICE: str = 'cpu'
    LOG_LEVEL: str = 'INFO'
    REGISTRY_URL: str | None = None
    WORKERS: int = 0


def configure_logging(level: str | int = 'INFO') -> None:
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
