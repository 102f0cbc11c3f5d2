from __future__ import annotations


class TrackerError(Exception):
    """Base class for every error raised by the tracker stack."""


class DimensionError(TrackerError, ValueError):
    pass


class ContractError(TrackerError, RuntimeError):
    pass


class ConfigError(TrackerError, ValueError):
    pass


class NonFiniteError(TrackerError, FloatingPointError):
    pass


class DataError(TrackerError, ValueError):
    pass


class DivergenceError(TrackerError, RuntimeError):
    def __init__(self, message: str, *, epoch: int, step: int) -> None:
        super().__init__(f"{message} (epoch={epoch}, step={step})")
        self.epoch = epoch
        self.step = step
