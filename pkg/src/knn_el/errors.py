"""Exception hierarchy.

Every error carries a short machine-readable ``category`` and the process
exit code the CLI maps it to (2 input, 3 state/fingerprint, 4 internal).
"""
from __future__ import annotations


class KnnElError(Exception):
    category = "internal"
    exit_code = 4


class InvalidInputError(KnnElError, ValueError):
    category = "invalid-input"
    exit_code = 2


class EmptyMentionError(InvalidInputError):
    category = "empty-mention"


class UnknownTextError(InvalidInputError, KeyError):
    category = "unknown-text"

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class DegenerateEmbeddingError(InvalidInputError):
    category = "degenerate-embedding"


class UnsupportedModeError(InvalidInputError):
    category = "unsupported-mode"


class InvalidSpecError(InvalidInputError):
    category = "invalid-spec"


class UndefinedMetricError(InvalidInputError):
    category = "undefined-metric"


class DataFileError(InvalidInputError):
    """Malformed or missing dataset / config input."""

    category = "io"


class InvalidStateError(KnnElError):
    category = "invalid-state"
    exit_code = 3


class IndexNotBuiltError(InvalidStateError):
    category = "index-not-built"


class FingerprintMismatchError(InvalidStateError):
    category = "fingerprint-mismatch"


class CorruptFileError(InvalidStateError):
    category = "corrupt-store"

    def __init__(self, message: str, category: str | None = None) -> None:
        super().__init__(message)
        if category is not None:
            self.category = category


class VersionMismatchError(CorruptFileError):
    def __init__(self, found: int, expected: int, what: str = "store") -> None:
        super().__init__(
            f"{what} file version {found} is not supported by this loader (expects version {expected})",
            category="version-mismatch",
        )
        self.found = found
        self.expected = expected
