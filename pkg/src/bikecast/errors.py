"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ValidationError and its subclasses mean
the caller handed us something malformed (exit 2), TransportError and
CacheLoadError mean I/O or a remote service failed (exit 1), and
OfflineMissError means offline mode needed a vector that is not cached
(exit 3). Anything else escaping is a bug.
"""
from __future__ import annotations


class ValidationError(ValueError):
    """Input violates a documented precondition or contract."""


class ShapeError(ValidationError):
    """Array shapes or dimensions do not line up."""


class WindowError(ValidationError):
    """A time axis is too short for the requested kernel or window."""


class InsufficientDataError(ValidationError):
    """The series is too short to cut a single training window."""


class StateError(RuntimeError):
    """An object was used out of order (e.g. a tape replayed twice)."""


class NumericError(ArithmeticError):
    """A computation produced NaN or infinity where finite values are required."""


class TransportError(RuntimeError):
    """The embedding service could not be reached or answered abnormally."""


class OfflineMissError(RuntimeError):
    """Offline mode was asked for texts that are not in the cache."""

    def __init__(self, missing_texts: list[str]):
        self.missing_texts = list(missing_texts)
        preview = ", ".join(repr(t[:40]) for t in self.missing_texts[:5])
        more = "" if len(self.missing_texts) <= 5 else f" (+{len(self.missing_texts) - 5} more)"
        super().__init__(
            f"offline mode: {len(self.missing_texts)} text(s) missing from cache: {preview}{more}"
        )


class CacheLoadError(RuntimeError):
    """The embedding cache file is corrupt or truncated."""
