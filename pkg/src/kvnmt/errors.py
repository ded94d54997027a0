"""Shared exception types."""


class KvnmtError(Exception):
    """Base class for all package errors."""


class DimensionError(KvnmtError, ValueError):
    """Array shapes or dtypes are incompatible for an operation."""


class MaskError(KvnmtError, ValueError):
    """A softmax mask leaves no admissible position."""


class VocabularyError(KvnmtError, ValueError):
    """A token id is outside the table it indexes."""


class GraphError(KvnmtError, RuntimeError):
    """A backward pass was requested on something that cannot provide it."""


class NumericError(KvnmtError, ArithmeticError):
    """A computation produced or met a non-finite / invalid value."""


class EmptyInputError(KvnmtError, ValueError):
    """An operation received an empty sequence or corpus."""


class ConfigError(KvnmtError, ValueError):
    """Invalid, unknown, or missing configuration values."""


class CheckpointError(KvnmtError, ValueError):
    """A checkpoint file is malformed or incompatible with the model."""


class ParseError(KvnmtError, ValueError):
    """A text file (alignments, vocab, config) could not be parsed."""
