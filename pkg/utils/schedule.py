"""
Global Epsilon and Rho Schedules

Epochs are 1-based; the budget is read once per epoch before its batches.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import pandas as pd

DEFAULT_EPS_BASE = 8.0 / 255.0


class ScheduleVariant(str, Enum):
    CONST = "const"
    LINEAR = "linear"
    CURIOUS = "curious"


@dataclass(frozen=True)
class ScheduleSpec:
    """
    Epsilon schedule.

    const:   eps_base at every epoch
    linear:  eps_base * min(epoch / t, 1)
    curious: gamma * eps_base * epoch / t up to epoch t, eps_base afterwards
    """

    variant: ScheduleVariant = ScheduleVariant.CONST
    eps_base: float = DEFAULT_EPS_BASE
    total_epochs: int = 100
    t: Optional[int] = None
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "variant", ScheduleVariant(self.variant))
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.variant == ScheduleVariant.CONST:
            if self.eps_base < 0:
                raise ValueError(f"eps_base must be >= 0, got {self.eps_base}")
            return
        if self.eps_base <= 0:
            raise ValueError(f"eps_base must be > 0 for {self.variant.value}, got {self.eps_base}")
        if self.t is None or not 1 <= self.t <= self.total_epochs:
            raise ValueError(f"t must lie in [1, {self.total_epochs}], got {self.t}")
        if self.variant == ScheduleVariant.CURIOUS and self.gamma < 1.0:
            raise ValueError(f"gamma must be >= 1 for curious, got {self.gamma}")

    @property
    def label(self) -> str:
        if self.variant == ScheduleVariant.LINEAR:
            return f"Linear-{self.t}"
        if self.variant == ScheduleVariant.CURIOUS:
            return f"Curious-({self.gamma:g},{self.t})"
        return "Const"


@dataclass(frozen=True)
class RhoSchedule:
    rho_initial: float = 0.05
    double_at_epoch: Optional[int] = None

    def __post_init__(self):
        if self.rho_initial <= 0:
            raise ValueError(f"rho_initial must be > 0, got {self.rho_initial}")
        if self.double_at_epoch is not None and self.double_at_epoch < 1:
            raise ValueError(f"double_at_epoch must be >= 1, got {self.double_at_epoch}")


def eps_at(spec: ScheduleSpec, epoch: int) -> float:
    if not 1 <= epoch <= spec.total_epochs:
        raise ValueError(f"epoch {epoch} outside [1, {spec.total_epochs}]")
    if spec.variant == ScheduleVariant.CONST:
        return spec.eps_base
    if spec.variant == ScheduleVariant.LINEAR:
        return spec.eps_base * min(epoch / spec.t, 1.0)
    if epoch <= spec.t:
        return spec.gamma * (spec.eps_base * (epoch / spec.t))
    return spec.eps_base


def rho_at(sched: RhoSchedule, epoch: int) -> float:
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    if sched.double_at_epoch is not None and epoch >= sched.double_at_epoch:
        return 2.0 * sched.rho_initial
    return sched.rho_initial


def tabulate(spec: ScheduleSpec, rho_sched: Optional[RhoSchedule] = None) -> pd.DataFrame:
    """One row per epoch: epoch, eps_max and (when given) rho."""
    epochs = range(1, spec.total_epochs + 1)
    table = {"epoch": list(epochs), "eps_max": [eps_at(spec, e) for e in epochs]}
    if rho_sched is not None:
        table["rho"] = [rho_at(rho_sched, e) for e in epochs]
    return pd.DataFrame(table)
