import copy
import json

import numpy as np
import pytest

from sccmarket.io import (CaseValidationError, SchemaVersionError, case_from_dict, case_to_dict,
                          load_case, save_case)


def test_shipped_30_bus_case_shape(ieee30):
    assert len(ieee30.buses) == 30
    assert len(ieee30.sync_gens) == 12
    assert len(ieee30.ibr_units) == 3
    assert ieee30.horizon == 24
    assert {g.bus for g in ieee30.sync_gens} == {2, 3, 4, 5, 27, 30}
    assert {c.bus for c in ieee30.ibr_units} == {1, 23, 26}
    assert 5109 <= ieee30.demand.min() and ieee30.demand.max() <= 7689


def test_round_trip_preserves_the_case(tmp_path, ieee30):
    path = tmp_path / "case.json"
    save_case(ieee30, path)
    back = load_case(path)
    assert case_to_dict(back) == case_to_dict(ieee30)
    assert np.array_equal(back.capacity_factors(), ieee30.capacity_factors())


def test_schema_version_is_checked(toy):
    doc = case_to_dict(toy)
    doc["schema_version"] = 2
    with pytest.raises(SchemaVersionError):
        case_from_dict(doc)


def test_all_violations_are_reported_together(toy):
    doc = copy.deepcopy(case_to_dict(toy))
    doc["sync_gens"][0]["p_min"] = 500
    doc["branches"][0]["x"] = -1
    doc["ibr_units"][0]["capacity_factor"] = [0.5]
    with pytest.raises(CaseValidationError) as err:
        case_from_dict(doc)
    ptrs = {p for p, _ in err.value.violations}
    assert {"/sync_gens/0/p_min", "/branches/0/x", "/ibr_units/0/capacity_factor"} <= ptrs


def test_islanded_case_is_a_validation_error(toy):
    doc = case_to_dict(toy)
    doc["buses"].append({"id": 4, "monitored": False})
    with pytest.raises(CaseValidationError):
        case_from_dict(doc)


def test_initial_output_must_match_initial_status(toy):
    doc = case_to_dict(toy)
    doc["sync_gens"][1]["p0"] = 30.0  # unit is offline at t=0
    with pytest.raises(CaseValidationError, match="p0"):
        case_from_dict(doc)


def test_case_file_is_plain_json(tmp_path, toy):
    path = tmp_path / "toy.json"
    save_case(toy, path)
    assert json.loads(path.read_text())["name"] == "toy3"
    assert not list(tmp_path.glob(".*.tmp"))
