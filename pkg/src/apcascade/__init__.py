"""Training-free instruction cascade for catalog attribute quality checks."""

from apcascade.errors import (
    ApcError,
    ArgumentError,
    BackendError,
    ConfigError,
    CoverageError,
    GenerationError,
    IntegrityError,
    MissingInstruction,
    MissingSAError,
    ParseError,
)

__version__ = "0.1.0"

__all__ = [
    "ApcError",
    "ArgumentError",
    "BackendError",
    "ConfigError",
    "CoverageError",
    "GenerationError",
    "IntegrityError",
    "MissingInstruction",
    "MissingSAError",
    "ParseError",
    "__version__",
]
