"""Hook dataclasses and type hints for network and training instrumentation."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass


@dataclass(frozen=True)
class ForwardEvent:
    kind: str
    count: int
    total: int


@dataclass(frozen=True)
class TrainStepEvent:
    step: int
    epoch: int
    loss_total: float
    loss_diff: float
    loss_cf1: float
    loss_cf2: float
    lr: float


ForwardHook = Callable[[ForwardEvent], None]
TrainStepHook = Callable[[TrainStepEvent], None]


__all__ = ["ForwardEvent", "ForwardHook", "TrainStepEvent", "TrainStepHook"]
