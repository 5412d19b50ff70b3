"""Exception hierarchy. Each family maps onto a stable CLI exit code."""

from __future__ import annotations


class PatchsmithError(Exception):
    exit_code = 1


class ConfigError(PatchsmithError, ValueError):
    """Invalid parameter, configuration key or sampler setting."""

    exit_code = 2


class ShapeMismatchError(ConfigError):
    pass


class TimeOutOfRangeError(ConfigError):
    pass


class UnsupportedCapabilityError(ConfigError):
    pass


class MissingAssetError(PatchsmithError, FileNotFoundError):
    exit_code = 3

    def __init__(self, message: str, entry: str | None = None):
        super().__init__(message)
        self.entry = entry


class NumericError(PatchsmithError, ArithmeticError):
    """NaN/inf loss or diverged training."""

    exit_code = 4

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class PredictorError(PatchsmithError, RuntimeError):
    def __init__(self, step: int, cause: BaseException):
        super().__init__(f"noise predictor failed at t={step}: {cause}")
        self.step = step


class StageError(PatchsmithError, RuntimeError):
    """Failure inside one stage (sample/render/detect) of the objective."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.exit_code = getattr(cause, "exit_code", 1)


class ReferenceMismatchError(ConfigError):
    pass
