from __future__ import annotations

import copy
import json

import pytest

from infusion_concurrence import InfusionProgram, Operator, Role, new_episode
from infusion_concurrence.drug_library import library_from_document

LIB_DOC = {
    "version": 7,
    "entries": [
        {
            "drug_id": "D1", "drug_name": "heparin", "care_area": "ICU",
            "dosing_unit": "mg_per_kg_per_h", "concentration_mg_per_ml": 1,
            "dose_limits": {"hard_min": 0.5, "soft_min": 1, "soft_max": 4, "hard_max": 8},
            "rate_limits_ml_per_h": {"hard_min": 1, "soft_min": 10, "soft_max": 500, "hard_max": 1000},
        },
        {
            "drug_id": "D2", "drug_name": "insulin", "care_area": "ICU",
            "dosing_unit": "mg_per_h", "concentration_mg_per_ml": 2,
            "dose_limits": {"hard_min": 1, "soft_min": 2, "soft_max": 20, "hard_max": 40},
            "rate_limits_ml_per_h": {"hard_min": 0.5, "soft_min": 1, "soft_max": 10, "hard_max": 20},
        },
    ],
}


@pytest.fixture
def lib_doc():
    return copy.deepcopy(LIB_DOC)


@pytest.fixture
def library():
    return library_from_document(copy.deepcopy(LIB_DOC))


@pytest.fixture
def program():
    return InfusionProgram(patient_id="PT1", drug_id="D1", care_area="ICU", dose_value=2.5,
                           dose_unit="mg_per_kg_per_h", rate_ml_per_h=175.0, vtbi_ml=50.0,
                           patient_weight_kg=70.0)


C = Operator("C", Role.COMMANDING)
E1 = Operator("E1")
E2 = Operator("E2")


def open_episode(library=None, executives=(E1, E2), **kw):
    ep = new_episode("P1", C, list(executives), library=library, **kw)
    if ep.require_read_out:
        ep.read_out(C)
    return ep


def concurred(library, program, **kw):
    """Episode in DersReview with both operators having keyed ``program``."""
    ep = open_episode(library, **kw)
    a, b = ep.entering_pair
    ep.submit_entry(a, program)
    ep.submit_entry(b, program)
    assert ep.compare_entries().concurred
    return ep


def dumps(doc) -> str:
    return json.dumps(doc)


def running(library, program, pump_id="P1", **kw):
    """Armed pump plus its Running episode."""
    from infusion_concurrence import Pump

    ep = concurred(library, program, **kw)
    ep.review()
    pump = Pump(pump_id)
    pump.arm(ep)
    return ep, pump
