"""Custom exceptions for pcrdiff."""

from __future__ import annotations


class PcrdError(RuntimeError):
    """Base error for the package."""

    exit_code = 1


class DegenerateQuaternion(PcrdError):
    """Raised when a quaternion is too close to zero to normalize."""


class NotARotation(PcrdError):
    """Raised when a matrix is not a proper rotation."""


class EmptyCloud(PcrdError):
    """Raised when an operation receives a cloud without points."""


class DegenerateGeometry(PcrdError):
    """Raised when points are collinear or coincident."""


class WeightUnderflow(PcrdError):
    """Raised when correspondence weights sum to (almost) zero."""


class GimbalLock(PcrdError):
    """Raised when Euler angles are requested at a pitch of +-90 degrees."""


class BadRange(PcrdError):
    """Raised when a sampling range is outside its valid interval."""


class BadStepCount(PcrdError):
    """Raised when a schedule length or sampling step count is invalid."""


class StepOutOfRange(PcrdError):
    """Raised when a timestep lies outside the schedule."""


class BadStepOrder(PcrdError):
    """Raised when a reverse step does not move towards t = 0."""


class ShapeMismatch(PcrdError):
    """Raised when array shapes do not agree."""


class MissingGradient(PcrdError):
    """Raised when the optimizer finds a parameter without a gradient."""


class NonDeterministicLoss(PcrdError):
    """Raised when two identical forward passes disagree."""


class NonFiniteLoss(PcrdError):
    """Raised when a training loss becomes NaN or infinite."""


class NumericalOverflow(PcrdError):
    """Raised when a normalization produces non-finite values."""


class TooFewPoints(PcrdError):
    """Raised when a cloud is smaller than the neighbourhood size."""


class BadCount(PcrdError):
    """Raised when a requested point count is too small."""


class BadFraction(PcrdError):
    """Raised when a crop fraction is outside (0, 1]."""


class EmptySet(PcrdError):
    """Raised when metrics are aggregated over nothing."""


class ConfigError(PcrdError):
    """Raised when a configuration value or key is invalid."""

    def __init__(self, key_path: str, message: str) -> None:
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path


class IoFailure(PcrdError):
    """Raised when a file cannot be read or written."""

    exit_code = 2


class ParseError(IoFailure):
    """Raised when a text file has a malformed line."""

    def __init__(self, path: str, line_no: int, message: str) -> None:
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class CheckpointVersionMismatch(IoFailure):
    """Raised when a checkpoint has an unknown magic or version."""


__all__ = [
    "PcrdError",
    "DegenerateQuaternion",
    "NotARotation",
    "EmptyCloud",
    "DegenerateGeometry",
    "WeightUnderflow",
    "GimbalLock",
    "BadRange",
    "BadStepCount",
    "StepOutOfRange",
    "BadStepOrder",
    "ShapeMismatch",
    "MissingGradient",
    "NonDeterministicLoss",
    "NonFiniteLoss",
    "NumericalOverflow",
    "TooFewPoints",
    "BadCount",
    "BadFraction",
    "EmptySet",
    "ConfigError",
    "IoFailure",
    "ParseError",
    "CheckpointVersionMismatch",
]
