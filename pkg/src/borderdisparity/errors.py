"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations

from typing import Iterable


class BDIError(Exception):
    """Base class; carries the module that raised it and any offending ids."""

    module = "borderdisparity"

    def __init__(self, message: str, ids: Iterable[str] = ()):
        super().__init__(message)
        self.ids = list(ids)

    def as_dict(self) -> dict:
        return {
            "error": type(self).__name__,
            "module": self.module,
            "message": str(self),
            "ids": self.ids,
        }


class ContractViolation(BDIError, ValueError):
    """A precondition of an operation was not met by the caller."""


class ConfigError(BDIError):
    module = "cli"


class ParseError(BDIError):
    module = "ingestion"

    def __init__(self, message: str, feature_index: int | None = None, ids=()):
        if feature_index is not None:
            message = f"feature {feature_index}: {message}"
        super().__init__(message, ids)
        self.feature_index = feature_index


class DuplicateKeyError(BDIError):
    module = "ingestion"


class GeometryKindError(ParseError):
    pass


class ColumnMappingError(BDIError):
    module = "ingestion"


class TransportError(BDIError):
    module = "ingestion"

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class RankError(BDIError):
    module = "regression"

    def __init__(self, message: str, columns: Iterable[str] = ()):
        super().__init__(message, columns)
        self.columns = list(columns)
