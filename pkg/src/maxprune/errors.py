"""Exception hierarchy shared by every maxprune module."""

from __future__ import annotations

from typing import Optional


class MaxPruneError(Exception):
    """Base class for all errors raised by the toolkit."""


class DimensionError(MaxPruneError, ValueError):
    """Tensor shapes disagree."""


class StructureError(MaxPruneError):
    """Network, maxout state, cache or lineage do not fit together."""


class DataError(MaxPruneError):
    """Dataset contents violate a precondition (labels, emptiness)."""


class ArgumentError(MaxPruneError, ValueError):
    """A numeric argument is outside its allowed range."""


class ConfigError(MaxPruneError, ValueError):
    """A run configuration failed validation."""


class UsageError(MaxPruneError):
    """The command line could not be parsed."""


class FormatError(MaxPruneError):
    """A file could not be parsed.

    ``offset`` is the byte offset (binary formats) or the line number (text
    formats) where parsing failed, when known.
    """

    def __init__(self, message: str, offset: Optional[int] = None) -> None:
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset
