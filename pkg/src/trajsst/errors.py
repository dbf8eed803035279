"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the domain an operation accepts."""


class ConfigError(ValueError):
    """A configuration value violates a structural invariant."""


class ShapeError(ValueError):
    """Tensor shapes do not agree."""


class FormatError(ValueError):
    """A file or stream does not follow the expected format."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss) or cannot proceed."""


class EmptyDatasetError(DomainError):
    pass
