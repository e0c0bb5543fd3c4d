"""Exception hierarchy shared across embedlab."""


class EmbedLabError(Exception):
    """Base class for all library errors."""


class DomainError(EmbedLabError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(EmbedLabError, ValueError):
    """A caller violated a shape or type contract."""


class ConfigError(EmbedLabError, ValueError):
    """An invalid or inconsistent configuration."""


class DegenerateBatchError(DomainError):
    """A batch whose statistics make the objective undefined."""


class NonFiniteError(EmbedLabError, ArithmeticError):
    """A NaN or Inf appeared where a finite value is required."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class FormatError(EmbedLabError, ValueError):
    """A binary or text file does not follow its declared format."""
