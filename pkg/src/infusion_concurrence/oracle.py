"""Closed-form probability of an undetected erroneous actuation.

Enumerates every program an operator model can key (with its probability)
and asks DERS which of them would survive to actuation. Deliberately shares
no sampling code with the simulator so the two can check each other.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import replace
from typing import Optional

from .canonical import keyed_string
from .drug_library import DrugLibrary, VerdictKind, check_program, lookup
from .errors import DersError, EntryNotFound, SpaceTooLarge
from .program import InfusionProgram

DEFAULT_CAP = 1_000_000

_SUB, _TRANS, _BOUNCE, _DRUG, _FIELD = (
    "DigitSubstitution", "AdjacentTransposition", "DoubleBounce", "WrongDrug", "WrongField")


def _digits(s):
    return [i for i, c in enumerate(s) if c in "0123456789"]


def _kind_outcomes(kind, model, intended, library):
    """Equally likely programs within one kind, as (program, weight) pairs summing to 1."""
    keyed = [f for f in model.fields if getattr(intended, f) is not None]
    if kind == _DRUG:
        others = sorted({e.drug_id for e in library.entries} - {intended.drug_id}) if library else []
        return [(replace(intended, drug_id=d), 1 / len(others)) for d in others]
    if kind == _FIELD:
        if keyed_string(intended.dose_value) == keyed_string(intended.rate_ml_per_h):
            return []
        return [(replace(intended, dose_value=intended.rate_ml_per_h,
                         rate_ml_per_h=intended.dose_value), 1.0)]
    per_field = {}
    for f in keyed:
        s = keyed_string(getattr(intended, f))
        if kind == _SUB:
            edits = [s[:i] + d + s[i + 1:] for i in _digits(s) for d in "0123456789" if d != s[i]]
        elif kind == _BOUNCE:
            edits = [s[:i] + s[i] + s[i:] for i in _digits(s)]
        else:
            edits = [s[:i] + s[i + 1] + s[i] + s[i + 2:] for i in range(len(s) - 1)
                     if s[i] != s[i + 1] and s[i] in "0123456789" and s[i + 1] in "0123456789"]
        if edits:
            per_field[f] = edits
    out = []
    for f, edits in per_field.items():
        w = 1 / (len(per_field) * len(edits))
        for e in edits:
            out.append((replace(intended, **{f: float(e) if e.strip(".") else 0.0}), w))
    return out


def corruption_distribution(model, intended: InfusionProgram, library: Optional[DrugLibrary] = None,
                            cap: int = DEFAULT_CAP) -> dict[InfusionProgram, float]:
    """P(keyed program = k | a slip occurred), grouped by canonical program."""
    by_kind = {}
    total = 0
    for kind, w in model.taxonomy.items():
        if w <= 0:
            continue
        outs = _kind_outcomes(kind, model, intended, library)
        total += len(outs)
        if total > cap:
            raise SpaceTooLarge(f"more than {cap} corruption outcomes")
        if outs:
            by_kind[kind] = (w, outs)
    if not by_kind:
        by_kind[_SUB] = (1.0, _kind_outcomes(_SUB, model, intended, library))
    z = sum(w for w, _ in by_kind.values())
    dist: dict[InfusionProgram, float] = defaultdict(float)
    for w, outs in by_kind.values():
        for prog, q in outs:
            dist[prog.canonical()] += (w / z) * q
    return dict(dist)


def survives(program: InfusionProgram, library: DrugLibrary, *, approve_soft: bool,
             allow_no_library: bool = False) -> bool:
    """Would this keyed program reach actuation once entered (and concurred)?"""
    try:
        entry = lookup(library, program.drug_id, program.care_area)
    except EntryNotFound:
        return allow_no_library
    if program.rate_ml_per_h <= 0 or program.vtbi_ml <= 0:
        return False
    try:
        verdict = check_program(entry, program)
    except DersError:
        return False
    if verdict.kind is VerdictKind.PASS:
        return True
    return verdict.kind is VerdictKind.SOFT and approve_soft


def _survival_terms(scenario, dist):
    intended = scenario.intended_program.canonical()
    lib = scenario.deployed_library
    approve = scenario.override_policy == "approve_all"
    return {k: survives(k, lib, approve_soft=approve, allow_no_library=scenario.allow_no_library)
            for k in dist if k != intended}


def oracle_undetected_probability(scenario, cap: int = DEFAULT_CAP) -> float:
    """Concurrence mode: p_x p_y (1 - r) sum_k qx_k qy_k S_k.

    q_k is the slip distribution, S_k marks programs that survive DERS and
    the override policy, r is the wrong-pump routing probability (a routed
    entry always mismatches). Never exceeds p_x p_y.
    """
    mx, my = scenario.operator_x, scenario.operator_y
    qx = corruption_distribution(mx, scenario.intended_program, scenario.deployed_library, cap)
    qy = qx if my == mx else corruption_distribution(my, scenario.intended_program,
                                                      scenario.deployed_library, cap)
    s = _survival_terms(scenario, qx)
    coincidence = sum(qx[k] * qy.get(k, 0.0) for k, ok in s.items() if ok)
    return (1 - scenario.wrong_pump_routing_p) * mx.p_error * my.p_error * coincidence


def oracle_single_probability(scenario, cap: int = DEFAULT_CAP) -> float:
    """Single-operator mode: (1 - r) p_x sum_k qx_k S_k + r S(routed program)."""
    mx = scenario.operator_x
    qx = corruption_distribution(mx, scenario.intended_program, scenario.deployed_library, cap)
    s = _survival_terms(scenario, qx)
    surviving = sum(qx[k] for k, ok in s.items() if ok)
    r = scenario.wrong_pump_routing_p
    routed_ok = survives(scenario.routed_program(), scenario.deployed_library,
                         approve_soft=scenario.override_policy == "approve_all",
                         allow_no_library=scenario.allow_no_library)
    return (1 - r) * mx.p_error * surviving + r * float(routed_ok)
