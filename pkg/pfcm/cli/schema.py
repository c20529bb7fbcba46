from dataclasses import dataclass, field
from pathlib import Path

from pydantic import BaseModel


class RunManifest(BaseModel):
    """Record of one CLI invocation; only ``wallclock_s`` varies between
    two runs with identical argv and seed.
    """

    command: str
    argv: list[str]
    config: dict
    seed: int | None = None
    inputs: dict[str, str] = {}
    outputs: dict[str, str] = {}
    artifact_hashes: dict[str, str] = {}
    versions: dict[str, str] = {}
    exit_code: int
    diagnostic: str | None = None
    wallclock_s: float


@dataclass
class CommandResult:
    outputs: dict[str, Path] = field(default_factory=dict)
    inputs: dict[str, Path] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int | None = None
