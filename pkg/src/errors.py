from typing import Optional


class DcrmError(Exception):
    """Base class for every error raised by the simulator."""


class InputError(DcrmError, ValueError):
    pass


class DimensionError(InputError):
    pass


class ConstraintViolationError(InputError):
    """A raw-mode field evaluated to ||beta|| >= 1."""

    def __init__(self, norm: float):
        self.norm = float(norm)
        super().__init__(f"beta field violates ||beta|| < 1 (norm = {self.norm!r})")


class ProjectionUndefinedError(InputError):
    pass


class DegenerateInputError(InputError):
    pass


class FitDegenerateError(DcrmError, ValueError):
    pass


class NumericOverflowError(DcrmError, RuntimeError):
    pass


class ScheduleExhaustedError(DcrmError, RuntimeError):
    pass


class EstimationFailedError(DcrmError, RuntimeError):
    pass


class ConfigError(DcrmError, ValueError):
    def __init__(self, message: str, key: Optional[str] = None,
                 line: Optional[int] = None, suggestion: Optional[str] = None):
        self.key = key
        self.line = line
        self.suggestion = suggestion
        parts = [message]
        if key:
            parts.append(f"key '{key}'")
        if line is not None:
            parts.append(f"line {line}")
        text = " | ".join(parts)
        if suggestion:
            text += f" (did you mean '{suggestion}'?)"
        super().__init__(text)
