"""Exception types shared across the package."""

from __future__ import annotations


class InvalidArgumentError(ValueError):
    pass


class LimitViolationError(ValueError):
    """A joint value lies outside its admissible range."""

    def __init__(self, joint: int, value: float, low: float, high: float):
        self.joint = joint
        self.value = value
        super().__init__(f"joint q{joint} = {value:.6g} outside [{low:.6g}, {high:.6g}]")


class ConfigError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


class NumericalFailure(FloatingPointError):
    pass


class CheckpointError(RuntimeError):
    pass
