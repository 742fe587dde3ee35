"""Exception types raised across the package.

Every error derives from :class:`FineAlignError` so the CLI can map any of
them to a nonzero exit code.
"""

from __future__ import annotations


class FineAlignError(Exception):
    """Base class for all package errors."""


class ZeroVectorError(FineAlignError, ValueError):
    pass


class NonFiniteError(FineAlignError, ValueError):
    pass


class ShapeError(FineAlignError, ValueError):
    pass


class EmptyPoolError(FineAlignError, ValueError):
    pass


class TooLongError(FineAlignError, ValueError):
    pass


class UnknownTokenError(FineAlignError, ValueError):
    pass


class InvalidBoxError(FineAlignError, ValueError):
    pass


class InvalidConfidenceError(FineAlignError, ValueError):
    pass


class NotNormalizedError(FineAlignError, ValueError):
    pass


class BadNegativeCountError(FineAlignError, ValueError):
    pass


class BatchTooSmallError(FineAlignError, ValueError):
    pass


class BadIndexError(FineAlignError, IndexError):
    pass


class MissingComponentError(FineAlignError, KeyError):
    pass


class TooFewSamplesError(FineAlignError, ValueError):
    pass


class DesyncError(FineAlignError, RuntimeError):
    pass


class VocabTooSmallError(FineAlignError, ValueError):
    pass


class NoSlotError(FineAlignError, ValueError):
    pass


class NonFiniteGradError(FineAlignError, FloatingPointError):
    pass


class MissingCheckpointError(FineAlignError, FileNotFoundError):
    pass


class BadLabelError(FineAlignError, ValueError):
    pass


class BadCandidateCountError(FineAlignError, ValueError):
    pass


class _LineError(FineAlignError, ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ParseError(_LineError):
    """Malformed JSON or missing field on a given (1-based) line."""


class ValidationError(_LineError):
    """Well-formed record that violates a data invariant."""
