from __future__ import annotations


class WayfinderError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(WayfinderError, ValueError):
    def __init__(self, problems: list[str] | str):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class SamplingError(WayfinderError):
    pass


class InputError(WayfinderError, ValueError):
    pass


class DomainError(WayfinderError, ValueError):
    pass


class SynthesisError(WayfinderError):
    pass


class ShapeError(WayfinderError, ValueError):
    pass


class NumericError(WayfinderError, FloatingPointError):
    pass


class UndefinedMetricError(WayfinderError, ValueError):
    pass


class StageOrderError(WayfinderError):
    """An upstream pipeline artifact is missing."""

    def __init__(self, stage: str, missing: str):
        self.stage = stage
        self.missing = missing
        super().__init__(f"missing {missing}: run stage '{stage}' first")
