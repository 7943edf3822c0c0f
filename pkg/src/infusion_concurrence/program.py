"""The infusion program: what an operator keys into the pump."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Optional

from .canonical import sig6


class DosingUnit(str, Enum):
    MG_PER_KG_PER_H = "mg_per_kg_per_h"
    MG_PER_H = "mg_per_h"
    ML_PER_H = "mL_per_h"


# fields an operator keys as digits; the order is the enumeration order everywhere
NUMERIC_FIELDS = ("dose_value", "rate_ml_per_h", "vtbi_ml", "patient_weight_kg")


@dataclass(frozen=True)
class InfusionProgram:
    patient_id: str
    drug_id: str
    care_area: str
    dose_value: float
    dose_unit: str
    rate_ml_per_h: float
    vtbi_ml: float
    patient_weight_kg: Optional[float] = None

    def validate(self) -> None:
        """Raise ValueError unless the program is physically meaningful."""
        for name in ("dose_value", "rate_ml_per_h", "vtbi_ml"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a finite positive number, got {v!r}")
        w = self.patient_weight_kg
        if w is not None and not (math.isfinite(w) and w > 0):
            raise ValueError(f"patient_weight_kg must be positive when present, got {w!r}")
        if not self.patient_id or not self.drug_id or not self.care_area:
            raise ValueError("patient_id, drug_id and care_area are required")

    def canonical(self) -> "InfusionProgram":
        """Same program with every numeric field rounded to 6 significant figures."""
        w = self.patient_weight_kg
        return replace(
            self,
            dose_value=sig6(float(self.dose_value)),
            rate_ml_per_h=sig6(float(self.rate_ml_per_h)),
            vtbi_ml=sig6(float(self.vtbi_ml)),
            patient_weight_kg=None if w is None else sig6(float(w)),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InfusionProgram":
        try:
            w = d.get("patient_weight_kg")
            return cls(
                patient_id=str(d["patient_id"]),
                drug_id=str(d["drug_id"]),
                care_area=str(d["care_area"]),
                dose_value=float(d["dose_value"]),
                dose_unit=str(d["dose_unit"]),
                rate_ml_per_h=float(d["rate_ml_per_h"]),
                vtbi_ml=float(d["vtbi_ml"]),
                patient_weight_kg=None if w is None else float(w),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"bad infusion program: {exc}") from exc
