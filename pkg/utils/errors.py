#!/usr/bin/env python3
"""
Exception types raised by the filterlex modules.

The CLI catches FilterLexError and turns it into a machine-readable error record;
anything else is a bug and propagates with a traceback.
"""

from typing import Iterable, Optional


class FilterLexError(Exception):
    """Base class for all expected failures"""


class EmbeddingParseError(FilterLexError):
    """Malformed embedding file"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class UnknownConceptError(FilterLexError):
    """A concept has no constituent token in the embedding table"""

    def __init__(self, concept: str, missing: Iterable[str]):
        self.concept = concept
        self.missing = sorted(set(missing))
        super().__init__(f"unknown concept '{concept}' (missing tokens: {', '.join(self.missing)})")


class ManifestError(FilterLexError):
    """Invalid manifest entry"""

    def __init__(self, message: str, entry_id: Optional[str] = None):
        if entry_id is not None:
            message = f"entry '{entry_id}': {message}"
        super().__init__(message)
        self.entry_id = entry_id


class ConfigError(FilterLexError):
    """Configuration violates a documented constraint"""


class EmptyMaskError(FilterLexError):
    """A mask (or activation region) has no active cell at feature resolution"""


class UnsupportedOperationError(FilterLexError):
    """Operation not available for this backbone kind"""


class ArtifactNotFoundError(FilterLexError):
    """A referenced file does not exist"""

    def __init__(self, path, what: str = "artifact"):
        self.path = str(path)
        super().__init__(f"{what} not found: {self.path}")


class TrainingError(FilterLexError):
    """Training could not proceed (non-finite loss, nothing to train on)"""


class EmptyExplanationError(FilterLexError):
    """Every probed image of a filter produced an empty input"""

    def __init__(self, filter_index: int, reason: str = "all probed images were empty"):
        self.filter_index = filter_index
        super().__init__(f"filter {filter_index}: {reason}")


class UndefinedStatisticError(FilterLexError):
    """A statistic is undefined for the given inputs (no pairs, zero variance, empty group)"""


class ZeroNormEmbeddingError(FilterLexError):
    """The explainer produced an all-zero vector that cannot be normalized"""
