"""Exception hierarchy shared across the package.

Every error that crosses a module boundary derives from :class:`MedsynthError`
so the CLI can map it onto an exit code in one place.
"""


class MedsynthError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(MedsynthError, ValueError):
    pass


class DomainError(MedsynthError, ValueError):
    pass


class ContractError(MedsynthError, ValueError):
    """A caller violated an operation's precondition."""


class NonFiniteError(MedsynthError, ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""


class InvalidSpecError(MedsynthError, ValueError):
    pass


class ConfigError(MedsynthError, ValueError):
    pass


class CheckpointError(MedsynthError, IOError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ImageFormatError(MedsynthError, ValueError):
    pass


class DivergenceError(MedsynthError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class ManifestError(MedsynthError, ValueError):
    pass


class MissingFilesError(MedsynthError, FileNotFoundError):
    """A manifest references files that do not exist; ``missing`` lists all of them."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"{len(self.missing)} missing file(s): " + ", ".join(map(str, self.missing)))


class OutputExistsError(MedsynthError, FileExistsError):
    """Refusal to overwrite earlier outputs without an explicit force flag."""
