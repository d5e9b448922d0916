import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from src.exceptions import SpecValidationError
from src.problem_io import (
    dump_json,
    load_json,
    load_problem,
    load_rule,
    problem_from_dict,
    problem_to_dict,
    rule_from_dict,
    rule_to_dict,
    uncertain_from_dict,
)
from src.reformulate import build_memoryless_uncertain_matrix_lp, solve_assembled

from conftest import as_dense, forced_instance, random_rule, random_spec


def test_problem_document_round_trip(rng, tmp_path):
    spec = random_spec(rng, 3, (2, 3, 2), 2, (2, 1, 2), (2, 2, 1))
    path = tmp_path / "problem.json"
    dump_json(problem_to_dict(spec), path)
    loaded = load_problem(path)
    assert (loaded.N, loaded.mu, loaded.d, loaded.n, loaded.m) == (spec.N, spec.mu, spec.d, spec.n, spec.m)
    for key, block in spec.A.items():
        assert_array_equal(as_dense(loaded.A[key]), as_dense(block))
    for key, block in spec.rhs.coefficients.items():
        assert_array_equal(loaded.rhs.coefficients[key], block)


def test_rhs_depth_is_widened_to_mu(forced):
    doc = problem_to_dict(forced)
    doc["mu"] = 2
    doc["beta_mu"] = 1
    spec = problem_from_dict(doc)
    assert spec.rhs.mu == 2
    assert_array_equal(spec.rhs.evaluate((2,)), forced.rhs.evaluate((2,)))


def test_rule_document_keeps_index_metadata(rng, tmp_path):
    spec = random_spec(rng, 2, (2, 3), 2, (1, 2), (1, 1))
    rule = random_rule(rng, spec)
    doc = rule_to_dict(rule)
    assert doc["kind"] == "u"
    assert doc["blocks"][-1]["fragments"][0] == [1, 1]
    path = tmp_path / "rule.json"
    dump_json(doc, path)
    loaded = load_rule(path, spec)
    for key, block in rule.coefficients.items():
        assert_array_equal(loaded.coefficients[key], block)


def test_rule_must_match_the_problem(rng, tmp_path, forced):
    spec = random_spec(rng, 2, (2, 3), 1, (1, 2), (1, 1))
    path = tmp_path / "rule.json"
    dump_json(rule_to_dict(random_rule(rng, spec)), path)
    with pytest.raises(SpecValidationError):
        load_rule(path, forced)


def test_invalid_documents():
    with pytest.raises(SpecValidationError):
        problem_from_dict({"N": 1, "mu": 1, "n": [1], "m": [1], "d": [2, 2], "objective": {}})
    doc = problem_to_dict(forced_instance())
    doc["A"][0]["triplets"] = [[2, 1, 1.0]]
    with pytest.raises(SpecValidationError):
        problem_from_dict(doc)
    doc = problem_to_dict(forced_instance())
    doc["beta"][0]["xi"] = [3]
    with pytest.raises(SpecValidationError):
        problem_from_dict(doc)
    with pytest.raises(SpecValidationError):
        rule_from_dict({"kind": "u", "mu": 1})


def test_malformed_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(SpecValidationError):
        load_json(path)


def test_dump_is_stable(tmp_path, forced):
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    dump_json(problem_to_dict(forced), first)
    dump_json(problem_to_dict(forced), second)
    assert first.read_bytes() == second.read_bytes()
    assert first.read_text().endswith("}\n")
    assert json.loads(first.read_text())["d"] == [2]


def test_uncertain_matrix_document():
    doc = problem_to_dict(forced_instance())
    doc["A"] = []
    doc["matrices"] = [
        {"t": 1, "s": 1, "xi": 1, "triplets": [[1, 1, -1.0]]},
        {"t": 1, "s": 1, "xi": 2, "triplets": [[1, 1, -2.0]]},
    ]
    problem = uncertain_from_dict(doc)
    solution = solve_assembled(build_memoryless_uncertain_matrix_lp(problem))
    # -xi * x <= -beta_xi gives x(1) = 1 and x(2) = 1
    assert solution.value == pytest.approx(1.0)
    assert_array_equal(np.round(solution.rule.block(1, 1).ravel(), 9), [1.0, 1.0])
