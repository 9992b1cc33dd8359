"""Exception taxonomy shared by every module in the toolkit.

All failures raised on purpose derive from :class:`HdrkitError` so callers
(and the command-line front end) can distinguish structured toolkit errors
from genuine bugs.
"""

from __future__ import annotations


class HdrkitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(HdrkitError):
    """Array or image dimensions violate an operation's contract."""


class ConfigError(HdrkitError):
    """A configuration value is out of range or inconsistent."""


class ContractError(HdrkitError):
    """An API was called out of sequence or with inconsistent arguments."""


class DomainError(HdrkitError):
    """A numeric value lies outside the mathematical domain of an operation."""


class FormatError(HdrkitError):
    """Byte stream does not parse as the expected file format.

    ``offset`` locates the first offending byte when the parser knows it.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(HdrkitError):
    """Optimization produced a non-finite loss or gradient."""
