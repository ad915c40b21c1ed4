"""Exception types shared across the workbench."""


class ArwbError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(ArwbError, ValueError):
    """Operand shapes do not fit the operation."""


class ContractError(ArwbError, ValueError):
    """A precondition of a public operation was violated."""


class FormatError(ArwbError, ValueError):
    """A file or byte stream does not follow its declared format."""


class KindMismatchError(FormatError):
    """A checkpoint holds a different model kind than the caller asked for."""


class ConfigError(ArwbError, ValueError):
    """Invalid run configuration, or a referenced artifact is missing."""
