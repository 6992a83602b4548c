"""Exception types shared across the package."""


class SurgToyError(Exception):
    pass


class ShapeError(SurgToyError, ValueError):
    pass


class NonFiniteError(SurgToyError, FloatingPointError):
    pass


class NonDivisible(SurgToyError, ValueError):
    def __init__(self, axis: str, extent: int, divisor: int):
        self.axis = axis
        self.extent = extent
        self.divisor = divisor
        super().__init__(f"{axis} extent {extent} is not divisible by {divisor}")


class MissingAnnotationFrame(SurgToyError, KeyError):
    pass


class NoTarget(SurgToyError, ValueError):
    """Raised when a mask plan leaves nothing to reconstruct."""


class UnsupportedTask(SurgToyError, ValueError):
    pass


class DegenerateInput(SurgToyError, ValueError):
    pass


class Divergence(SurgToyError, RuntimeError):
    def __init__(self, stage: str, step: int, value: float):
        self.stage = stage
        self.step = step
        self.value = value
        super().__init__(f"{stage}: non-finite loss {value!r} at step {step}")


class SequenceOverflow(SurgToyError, ValueError):
    pass


class MissingCheckpoint(SurgToyError, FileNotFoundError):
    def __init__(self, stage: str, path):
        self.stage = stage
        self.path = path
        super().__init__(f"missing checkpoint for stage '{stage}': {path}")


class FormatError(SurgToyError, ValueError):
    pass


class ConfigError(SurgToyError, ValueError):
    pass
