"""Exception hierarchy shared by every module."""

from __future__ import annotations


class ApcError(Exception):
    """Base class for all package errors."""


class ArgumentError(ApcError, ValueError):
    pass


class ConfigError(ApcError):
    pass


class IntegrityError(ApcError):
    """Referential or uniqueness violation in catalog / instruction data."""

    def __init__(self, message: str, ids: tuple[str, ...] = (), lines: tuple[int, ...] = ()):
        super().__init__(message)
        self.ids = ids
        self.lines = lines


class ParseError(ApcError):
    """Malformed input record or unparseable model output."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        super().__init__(message)
        self.line = line
        self.source = source


class BackendError(ApcError):
    def __init__(self, message: str, status_code: int | None = None):
        super().__init__(message)
        self.status_code = status_code


class GenerationError(ApcError):
    def __init__(self, message: str, pair: tuple[str, str] | None = None):
        super().__init__(message)
        self.pair = pair


class MissingSAError(ApcError):
    """No instruction is available for an attribute in the previous iteration."""


class MissingInstruction(ApcError):
    pass


class CoverageError(ApcError):
    def __init__(self, message: str, pairs: list[tuple[str, str]] | None = None):
        super().__init__(message)
        self.pairs = pairs or []
