from __future__ import annotations

from typing import Any


class LatentfitError(Exception):
    pass


class ConfigError(LatentfitError):
    pass


class MissingInputError(LatentfitError):
    pass


class NumericalError(LatentfitError):
    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.diagnostics = dict(diagnostics) if diagnostics is not None else {}


class IncompatibleInputError(ConfigError, ValueError):
    """An input file exists but cannot be used with this run."""
