"""Exception hierarchy.  ``exit_code`` is what the CLI returns for each kind."""


class CouinsegError(Exception):
    exit_code = 1


class FormatError(CouinsegError):
    exit_code = 4


class LengthError(FormatError):
    """Payload shorter or longer than the header promises."""


class GeometryError(CouinsegError):
    exit_code = 7


class DomainError(CouinsegError, ValueError):
    """Input outside the domain an operation accepts (coords, indices, kinds)."""

    exit_code = 8


class EmptyInputError(DomainError):
    pass


class ConfigError(CouinsegError, ValueError):
    exit_code = 5


class LabelError(DomainError):
    pass


class TrainingDiverged(CouinsegError):
    exit_code = 6

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class OutputExistsError(CouinsegError):
    """Refusing to overwrite existing outputs without ``--force``."""

    exit_code = 9
