from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum


class AlarmKind(str, Enum):
    SOFT_LIMIT = "SoftLimit"
    HARD_LIMIT = "HardLimit"
    OCCLUSION = "Occlusion"
    AIR_IN_LINE = "AirInLine"
    SECONDARY_BAG_MISALIGNMENT = "SecondaryBagMisalignment"
    SECONDARY_CLAMP_MALADJUSTMENT = "SecondaryClampMaladjustment"
    TUBE_LAYOUT_FAULT = "TubeLayoutFault"
    OVERRIDE_BUDGET_EXCEEDED = "OverrideBudgetExceeded"
    WRONG_PUMP_ROUTING = "WrongPumpRouting"


# only DERS verdicts may produce these
DERS_KINDS = frozenset({AlarmKind.SOFT_LIMIT, AlarmKind.HARD_LIMIT})


@dataclass
class AlarmEvent:
    alarm_id: str
    kind: AlarmKind
    clinically_significant: bool
    raised_at: float
    acks: list[tuple[str, float]] = field(default_factory=list)

    @property
    def required_acks(self) -> int:
        return 2 if self.clinically_significant else 1

    @property
    def satisfied(self) -> bool:
        return len(self.acks) >= self.required_acks


@dataclass(frozen=True)
class FaultTrigger:
    """A sensed fault, injected by the caller into a pump step."""

    kind: AlarmKind
    clinically_significant: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", AlarmKind(self.kind))
        if self.kind in DERS_KINDS:
            raise ValueError(f"{self.kind.value} alarms come only from DERS verdicts")
