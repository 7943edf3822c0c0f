"""Scripted operator error model: how a keyed entry goes wrong."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Optional

from .canonical import keyed_string, parse_keyed
from .drug_library import DrugLibrary
from .errors import InvalidScenario, NoCorruptionApplicable
from .program import NUMERIC_FIELDS, InfusionProgram
from .rng import Stream


class CorruptionKind(str, Enum):
    DIGIT_SUBSTITUTION = "DigitSubstitution"
    ADJACENT_TRANSPOSITION = "AdjacentTransposition"
    DOUBLE_BOUNCE = "DoubleBounce"
    WRONG_DRUG = "WrongDrug"
    WRONG_FIELD = "WrongField"


KIND_ORDER = tuple(CorruptionKind)
DEFAULT_FIELDS = ("dose_value", "rate_ml_per_h", "vtbi_ml")


@dataclass(frozen=True)
class OperatorModel:
    """Error behaviour of one scripted operator.

    Each keyed entry is wrong with probability ``1/n``; the kind of slip is
    drawn from ``taxonomy``. ``base_miss`` and ``fatigue_c`` drive the chance
    of missing an alarm acknowledgment (see ``miss_probability``).
    """

    n: int = 1
    taxonomy: Mapping[str, float] = field(default_factory=lambda: {"DigitSubstitution": 1.0})
    base_miss: float = 0.0
    fatigue_c: float = 0.0
    fields: tuple[str, ...] = DEFAULT_FIELDS

    def __post_init__(self):
        if not isinstance(self.n, int) or isinstance(self.n, bool) or self.n < 1:
            raise InvalidScenario(f"n must be an integer >= 1, got {self.n!r}")
        tax = {}
        for k, w in dict(self.taxonomy).items():
            try:
                kind = CorruptionKind(k)
            except ValueError:
                raise InvalidScenario(f"unknown corruption kind {k!r}") from None
            if not isinstance(w, (int, float)) or not math.isfinite(w) or w < 0:
                raise InvalidScenario(f"taxonomy weight for {k} must be >= 0")
            tax[kind.value] = float(w)
        if not tax or abs(sum(tax.values()) - 1.0) > 1e-9:
            raise InvalidScenario(f"taxonomy weights must sum to 1, got {sum(tax.values())}")
        object.__setattr__(self, "taxonomy", tax)
        if not 0.0 <= self.base_miss <= 1.0:
            raise InvalidScenario("base_miss must lie in [0, 1]")
        if not (math.isfinite(self.fatigue_c) and self.fatigue_c >= 0):
            raise InvalidScenario("fatigue_c must be >= 0")
        fields_ = tuple(self.fields)
        if not fields_ or any(f not in NUMERIC_FIELDS for f in fields_) or len(set(fields_)) != len(fields_):
            raise InvalidScenario(f"fields must be distinct names from {NUMERIC_FIELDS}")
        object.__setattr__(self, "fields", fields_)

    @property
    def p_error(self) -> float:
        return 1.0 / self.n

    def weight(self, kind: CorruptionKind) -> float:
        return self.taxonomy.get(kind.value, 0.0)

    @classmethod
    def from_dict(cls, d: dict) -> "OperatorModel":
        if not isinstance(d, dict) or "n" not in d:
            raise InvalidScenario("operator model needs at least 'n'")
        kw = {"n": d["n"]}
        if "taxonomy" in d:
            kw["taxonomy"] = d["taxonomy"]
        if "base_miss" in d:
            kw["base_miss"] = float(d["base_miss"])
        if "fatigue_c" in d:
            kw["fatigue_c"] = float(d["fatigue_c"])
        if "fields" in d:
            kw["fields"] = tuple(d["fields"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {"n": self.n, "taxonomy": dict(sorted(self.taxonomy.items())),
                "base_miss": self.base_miss, "fatigue_c": self.fatigue_c,
                "fields": list(self.fields)}


# -- digit-string edits --------------------------------------------------------


def _digit_positions(s: str) -> list[int]:
    return [i for i, ch in enumerate(s) if ch.isdigit()]


def _transposable_pairs(s: str) -> list[int]:
    return [i for i in range(len(s) - 1)
            if s[i].isdigit() and s[i + 1].isdigit() and s[i] != s[i + 1]]


def substitute_digit(s: str, pos: int, digit: str) -> str:
    return s[:pos] + digit + s[pos + 1:]


def transpose_digits(s: str, pos: int) -> str:
    return s[:pos] + s[pos + 1] + s[pos] + s[pos + 2:]


def double_bounce(s: str, pos: int) -> str:
    """Key the digit at ``pos`` twice: ``double_bounce("12.5", 1) == "122.5"``."""
    return s[:pos + 1] + s[pos] + s[pos + 1:]


def _keyed_fields(model: OperatorModel, program: InfusionProgram) -> list[str]:
    return [f for f in model.fields if getattr(program, f) is not None]


def _other_drugs(program: InfusionProgram, library: Optional[DrugLibrary]) -> list[str]:
    if library is None:
        return []
    return [d for d in library.drug_ids() if d != program.drug_id]


def _applicable(kind: CorruptionKind, model, program, library) -> bool:
    keyed = _keyed_fields(model, program)
    if kind in (CorruptionKind.DIGIT_SUBSTITUTION, CorruptionKind.DOUBLE_BOUNCE):
        return bool(keyed)
    if kind is CorruptionKind.ADJACENT_TRANSPOSITION:
        return any(_transposable_pairs(keyed_string(getattr(program, f))) for f in keyed)
    if kind is CorruptionKind.WRONG_DRUG:
        return bool(_other_drugs(program, library))
    return keyed_string(program.dose_value) != keyed_string(program.rate_ml_per_h)


def apply_corruption(kind: CorruptionKind, model: OperatorModel, intended: InfusionProgram,
                     rng: Stream, library: Optional[DrugLibrary] = None) -> InfusionProgram:
    """Apply one slip of ``kind``; raises NoCorruptionApplicable if it cannot occur."""
    if not _applicable(kind, model, intended, library):
        raise NoCorruptionApplicable(kind.value)
    if kind is CorruptionKind.WRONG_DRUG:
        return replace(intended, drug_id=rng.choice(_other_drugs(intended, library)))
    if kind is CorruptionKind.WRONG_FIELD:
        return replace(intended, dose_value=intended.rate_ml_per_h, rate_ml_per_h=intended.dose_value)
    keyed = _keyed_fields(model, intended)
    if kind is CorruptionKind.ADJACENT_TRANSPOSITION:
        keyed = [f for f in keyed if _transposable_pairs(keyed_string(getattr(intended, f)))]
        name = rng.choice(keyed)
        s = keyed_string(getattr(intended, name))
        new = transpose_digits(s, rng.choice(_transposable_pairs(s)))
    else:
        name = rng.choice(keyed)
        s = keyed_string(getattr(intended, name))
        pos = rng.choice(_digit_positions(s))
        if kind is CorruptionKind.DOUBLE_BOUNCE:
            new = double_bounce(s, pos)
        else:
            alternatives = [d for d in "0123456789" if d != s[pos]]
            new = substitute_digit(s, pos, rng.choice(alternatives))
    return replace(intended, **{name: parse_keyed(new)})


def corrupt_entry(model: OperatorModel, intended: InfusionProgram, rng: Stream,
                  library: Optional[DrugLibrary] = None) -> InfusionProgram:
    """What the operator actually keys when they meant ``intended``.

    With probability ``1 - 1/n`` the entry is exact. Otherwise one slip is
    applied; kinds that cannot occur on this program are excluded from the
    draw (equivalent to resampling), falling back to digit substitution.
    """
    if model.n > 1 and rng.random() >= model.p_error:
        return intended
    kinds = [k for k in KIND_ORDER
             if model.weight(k) > 0 and _applicable(k, model, intended, library)]
    if not kinds:
        kind = CorruptionKind.DIGIT_SUBSTITUTION
    else:
        kind = kinds[rng.weighted_index([model.weight(k) for k in kinds])]
    return apply_corruption(kind, model, intended, rng, library)


def force_corruption(kind: CorruptionKind | str, model: OperatorModel, intended: InfusionProgram,
                     seed: int = 0, library: Optional[DrugLibrary] = None) -> InfusionProgram:
    """Deterministically produce a corrupted program of a given kind (test helper)."""
    return apply_corruption(CorruptionKind(kind), model, intended, Stream(seed, 0, 99), library)

