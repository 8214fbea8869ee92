"""Exception types shared across the pipeline."""

from __future__ import annotations


class CinesynthError(Exception):
    """Base class for all pipeline errors."""


class InvalidPlot(CinesynthError):
    """A plot failed validation; carries the violation report."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(v.message for v in self.violations)
        super().__init__(f"invalid plot: {lines}")


class BackendUnavailable(CinesynthError):
    """Transport to a backend failed after exhausting retries."""


class MockScriptMiss(CinesynthError):
    """A mock backend had no entry matching the request (a test bug)."""


class ContractViolation(CinesynthError):
    """A backend or model file violated its declared contract."""


class InvalidRequest(CinesynthError):
    """A request failed client-side validation."""


class ParseFailed(CinesynthError):
    """Structured output could not be parsed at any tier."""

    def __init__(self, message: str, raw: str = "", offset: int | None = None):
        self.raw = raw
        self.offset = offset
        detail = message if offset is None else f"{message} (at offset {offset})"
        super().__init__(detail)


class StageFailed(CinesynthError):
    """A generation stage could not produce valid output after repairs."""

    def __init__(self, stage: str, reason: str):
        self.stage = stage
        self.reason = reason
        super().__init__(f"stage '{stage}' failed: {reason}")


class StyleTrainingFailed(CinesynthError):
    """An inversion training job exited with failure."""

    def __init__(self, message: str, log_path=None):
        self.log_path = log_path
        super().__init__(message)


class MissingCasting(CinesynthError):
    """A mentioned character has no celebrity mapping."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"character '{name}' has no celebrity casting")


class PackagingRefused(CinesynthError):
    """Packaging was refused because keyframes have gaps."""


class StageOrderViolation(CinesynthError):
    """A checkpoint was attempted before its predecessor stages completed."""


class NotFound(CinesynthError):
    """A blob or record does not exist in the store."""


class DegenerateEmbedding(CinesynthError):
    """An embedding vector is zero or non-finite."""


class InsufficientFrames(CinesynthError):
    """Too few frames for the requested metric."""


class DegenerateDistribution(CinesynthError):
    """Samples carry no usable variance for a distribution fit."""


class ImageTooSmall(CinesynthError):
    """Image below the minimum size for the requested operation."""


class InvalidVerdict(CinesynthError):
    """The judge failed to produce a usable verdict after retries."""


class NoOverlap(CinesynthError):
    """Benchmark and prediction files share no item ids."""


class DuplicateId(CinesynthError):
    """An item id appears more than once in a single file."""


class ConfigError(CinesynthError):
    """The pipeline configuration is unusable."""
