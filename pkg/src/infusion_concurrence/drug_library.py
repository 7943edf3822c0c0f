"""Drug library parsing and the dose-error-reduction (DERS) verdict."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from .canonical import canonical_bytes, sha256_hex, sig6
from .errors import (
    DuplicateEntry,
    EntryNotFound,
    LimitOrderViolation,
    MalformedDocument,
    MissingWeight,
    NonPositiveConcentration,
    UnitMismatch,
)
from .program import DosingUnit, InfusionProgram

_BAND_KEYS = ("hard_min", "soft_min", "soft_max", "hard_max")


@dataclass(frozen=True)
class LimitBand:
    hard_min: float
    soft_min: float
    soft_max: float
    hard_max: float

    def __post_init__(self):
        vals = (self.hard_min, self.soft_min, self.soft_max, self.hard_max)
        if not all(isinstance(v, (int, float)) and math.isfinite(v) and v >= 0 for v in vals):
            raise LimitOrderViolation(None, f"bounds must be finite and >= 0: {vals}")
        if not (self.hard_min <= self.soft_min <= self.soft_max <= self.hard_max):
            raise LimitOrderViolation(None, f"need hard_min <= soft_min <= soft_max <= hard_max, got {vals}")

    def classify(self, value: float) -> Optional[str]:
        """None inside the soft band, "soft" inside the hard band only, else "hard".

        Both bands are inclusive at their bounds.
        """
        if value < self.hard_min or value > self.hard_max:
            return "hard"
        if value < self.soft_min or value > self.soft_max:
            return "soft"
        return None

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in _BAND_KEYS}


@dataclass(frozen=True)
class DrugLibraryEntry:
    drug_id: str
    drug_name: str
    care_area: str
    dosing_unit: DosingUnit
    concentration_mg_per_ml: float
    dose_limits: LimitBand
    rate_limits_ml_per_h: LimitBand

    @property
    def key(self) -> tuple[str, str]:
        return (self.drug_id, self.care_area)

    def to_dict(self) -> dict:
        return {
            "drug_id": self.drug_id,
            "drug_name": self.drug_name,
            "care_area": self.care_area,
            "dosing_unit": self.dosing_unit.value,
            "concentration_mg_per_ml": float(self.concentration_mg_per_ml),
            "dose_limits": self.dose_limits.to_dict(),
            "rate_limits_ml_per_h": self.rate_limits_ml_per_h.to_dict(),
        }


@dataclass(frozen=True)
class DrugLibrary:
    version: int
    entries: tuple[DrugLibraryEntry, ...]
    digest: str = ""
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        ordered = tuple(sorted(self.entries, key=lambda e: e.key))
        object.__setattr__(self, "entries", ordered)
        index = {}
        for e in ordered:
            if e.key in index:
                raise DuplicateEntry(e.key)
            index[e.key] = e
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "digest", sha256_hex(self.canonical_bytes()))

    def to_document(self) -> dict:
        return {"version": self.version, "entries": [e.to_dict() for e in self.entries]}

    def canonical_bytes(self) -> bytes:
        return canonical_bytes(self.to_document())

    def serialize(self) -> str:
        return self.canonical_bytes().decode("utf-8")

    def lookup(self, drug_id: str, care_area: str) -> DrugLibraryEntry:
        return lookup(self, drug_id, care_area)

    def drug_ids(self) -> list[str]:
        return sorted({e.drug_id for e in self.entries})


def _band(raw, key, name) -> LimitBand:
    if not isinstance(raw, dict) or set(raw) != set(_BAND_KEYS):
        raise MalformedDocument(f"{key}: {name} must be an object with keys {_BAND_KEYS}")
    vals = [raw[k] for k in _BAND_KEYS]
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
        raise MalformedDocument(f"{key}: {name} bounds must be numbers")
    try:
        return LimitBand(*(float(v) for v in vals))
    except LimitOrderViolation as exc:
        raise LimitOrderViolation(key, f"{name}: {exc.detail}") from None


def _entry(raw) -> DrugLibraryEntry:
    if not isinstance(raw, dict):
        raise MalformedDocument("entries must be objects")
    required = ("drug_id", "drug_name", "care_area", "dosing_unit",
                "concentration_mg_per_ml", "dose_limits", "rate_limits_ml_per_h")
    missing = [k for k in required if k not in raw]
    if missing:
        raise MalformedDocument(f"entry missing fields {missing}")
    for k in ("drug_id", "drug_name", "care_area"):
        if not isinstance(raw[k], str) or not raw[k]:
            raise MalformedDocument(f"entry field {k} must be a non-empty string")
    key = (raw["drug_id"], raw["care_area"])
    try:
        unit = DosingUnit(raw["dosing_unit"])
    except ValueError:
        raise MalformedDocument(f"{key}: unknown dosing_unit {raw['dosing_unit']!r}") from None
    conc = raw["concentration_mg_per_ml"]
    if not isinstance(conc, (int, float)) or isinstance(conc, bool) or not math.isfinite(conc):
        raise MalformedDocument(f"{key}: concentration must be a finite number")
    if conc <= 0:
        raise NonPositiveConcentration(key)
    return DrugLibraryEntry(
        drug_id=raw["drug_id"],
        drug_name=raw["drug_name"],
        care_area=raw["care_area"],
        dosing_unit=unit,
        concentration_mg_per_ml=float(conc),
        dose_limits=_band(raw["dose_limits"], key, "dose_limits"),
        rate_limits_ml_per_h=_band(raw["rate_limits_ml_per_h"], key, "rate_limits_ml_per_h"),
    )


def library_from_document(doc) -> DrugLibrary:
    if not isinstance(doc, dict):
        raise MalformedDocument("top level must be an object")
    version = doc.get("version")
    if not isinstance(version, int) or isinstance(version, bool) or version < 0:
        raise MalformedDocument("version must be a non-negative integer")
    raw_entries = doc.get("entries")
    if not isinstance(raw_entries, list):
        raise MalformedDocument("entries must be a list")
    entries = [_entry(r) for r in raw_entries]
    seen = set()
    for e in entries:
        if e.key in seen:
            raise DuplicateEntry(e.key)
        seen.add(e.key)
    lib = DrugLibrary(version=version, entries=tuple(entries))
    stated = doc.get("digest")
    if stated is not None and stated != lib.digest:
        raise MalformedDocument(f"digest mismatch: document says {stated}, content hashes to {lib.digest}")
    return lib


def parse_library(text: str | bytes) -> DrugLibrary:
    """Parse and validate a drug library document (JSON)."""
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedDocument(f"not valid JSON: {exc}") from None
    return library_from_document(doc)


def lookup(library: DrugLibrary, drug_id: str, care_area: str) -> DrugLibraryEntry:
    try:
        return library._index[(drug_id, care_area)]
    except KeyError:
        raise EntryNotFound(drug_id, care_area) from None


# -- DERS --------------------------------------------------------------------


class VerdictKind(str, Enum):
    PASS = "Pass"
    SOFT = "SoftViolation"
    HARD = "HardViolation"


@dataclass(frozen=True)
class Violation:
    field: str
    value: float
    bound: str  # e.g. "soft_max"
    limit: float
    severity: str  # "soft" | "hard"

    def to_dict(self) -> dict:
        return {"field": self.field, "value": self.value, "bound": self.bound,
                "limit": self.limit, "severity": self.severity}


@dataclass(frozen=True)
class DersVerdict:
    kind: VerdictKind
    violations: tuple[Violation, ...] = ()

    @property
    def is_pass(self) -> bool:
        return self.kind is VerdictKind.PASS

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "violations": [v.to_dict() for v in self.violations]}


def _to_mg_per_h(value: float, unit: str, weight, conc: float) -> float:
    if unit == DosingUnit.MG_PER_H:
        return value
    if unit == DosingUnit.MG_PER_KG_PER_H:
        if not weight:
            raise MissingWeight("per-kg dose needs a patient weight")
        return value * weight
    if unit == DosingUnit.ML_PER_H:
        return value * conc
    raise UnitMismatch(f"unknown dose unit {unit!r}")


def normalized_dose(entry: DrugLibraryEntry, program: InfusionProgram) -> float:
    """Dose expressed in the entry's dosing unit, rounded to 6 significant figures."""
    unit = program.dose_unit
    target = entry.dosing_unit
    if unit == target:
        if unit == DosingUnit.MG_PER_KG_PER_H and not program.patient_weight_kg:
            raise MissingWeight("per-kg dose needs a patient weight")
        return sig6(program.dose_value)
    weight = program.patient_weight_kg
    mg_h = _to_mg_per_h(program.dose_value, unit, weight, entry.concentration_mg_per_ml)
    if target == DosingUnit.MG_PER_H:
        out = mg_h
    elif target == DosingUnit.MG_PER_KG_PER_H:
        if not weight:
            raise MissingWeight("per-kg library limit needs a patient weight")
        out = mg_h / weight
    else:
        out = mg_h / entry.concentration_mg_per_ml
    return sig6(out)


def _field_violation(name, value, band: LimitBand) -> Optional[Violation]:
    sev = band.classify(value)
    if sev is None:
        return None
    low = value < (band.hard_min if sev == "hard" else band.soft_min)
    bound = f"{sev}_{'min' if low else 'max'}"
    return Violation(name, value, bound, getattr(band, bound), sev)


def check_program(entry: DrugLibraryEntry, program: InfusionProgram) -> DersVerdict:
    """Classify a program against the entry's dose and rate bands."""
    if program.drug_id != entry.drug_id:
        raise UnitMismatch(f"program drug {program.drug_id!r} does not match entry {entry.drug_id!r}")
    checks = (
        ("dose", normalized_dose(entry, program), entry.dose_limits),
        ("rate_ml_per_h", sig6(program.rate_ml_per_h), entry.rate_limits_ml_per_h),
    )
    found = tuple(v for v in (_field_violation(n, x, b) for n, x, b in checks) if v is not None)
    if not found:
        return DersVerdict(VerdictKind.PASS)
    if any(v.severity == "hard" for v in found):
        return DersVerdict(VerdictKind.HARD, found)
    return DersVerdict(VerdictKind.SOFT, found)


def make_library(entries: Iterable[DrugLibraryEntry], version: int = 1) -> DrugLibrary:
    return DrugLibrary(version=version, entries=tuple(entries))
