"""Exception hierarchy shared across the package."""


class TTStreamError(Exception):
    """Base class for all errors raised by ttstream."""


class ShapeError(TTStreamError, ValueError):
    """Operand shapes are incompatible."""


class InvalidMaskError(TTStreamError, ValueError):
    """An attention mask row has no allowed entry."""


class ConfigError(TTStreamError, ValueError):
    """A model or mask configuration is invalid."""


class SequencingError(TTStreamError, RuntimeError):
    """Chunks were fed to a stream out of order or after the final chunk."""


class FormatError(TTStreamError):
    """Base class for checkpoint and feature-file decoding errors."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class UnknownDtypeError(FormatError):
    pass


class ManifestError(FormatError):
    """Manifest is malformed or disagrees with the tensor directory."""


class SizeMismatchError(FormatError):
    """Header-declared sizes disagree with the payload or exceed the cap."""
