from enum import IntEnum


class ExitCode(IntEnum):
    OK = 0
    USAGE = 2
    METADATA_MISMATCH = 3
    NUMERICAL_FAILURE = 4
    IO_ERROR = 5


class PFCMError(Exception):
    """Base error carrying the exit code the CLI reports for it."""

    exit_code = ExitCode.USAGE

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class UsageError(PFCMError):
    exit_code = ExitCode.USAGE


class MetadataMismatchError(PFCMError):
    exit_code = ExitCode.METADATA_MISMATCH


class NumericalError(PFCMError):
    exit_code = ExitCode.NUMERICAL_FAILURE


class ArtifactIOError(PFCMError):
    exit_code = ExitCode.IO_ERROR
