import json

import numpy as np
import pytest

from src.exceptions import ObjectiveError, ShapeMismatchError, SizeGuardError
from src.models import AdditiveRhs, ObjectiveSpec, ProblemSpec, RuleCoefficients
from src.policy import (
    PolicySimulator,
    SplitMix64,
    exhaustive_scenarios,
    expected_cost,
    sample_scenarios,
    simulate,
)
from src.reformulate import solve_cddr

from conftest import forced_instance, random_rule, random_spec


def forced_rule():
    return RuleCoefficients.from_blocks((2,), 1, (1,), {(1, 1): [[1.0], [2.0]]})


def test_splitmix_reference_stream():
    rng = SplitMix64(0)
    assert rng.next_u64() == 0xE220A8397B1DCDAF
    assert rng.next_u64() == 0x6E789E6AA1B965F4


def test_splitmix_floats_and_choice():
    rng = SplitMix64(42)
    draws = [rng.next_float() for _ in range(1000)]
    assert all(0.0 <= u < 1.0 for u in draws)
    rng = SplitMix64(7)
    counts = np.bincount([rng.choice([0.2, 0.8]) for _ in range(4000)], minlength=2)
    assert 600 < counts[0] < 1000


def test_zero_problem_zero_report():
    rhs = AdditiveRhs.from_blocks((2, 2), 1, (1, 1))
    spec = ProblemSpec(
        N=2, n=(1, 1), m=(1, 1), d=(2, 2), A={}, rhs=rhs, mu=1,
        objective=ObjectiveSpec.expected([[1.0], [1.0]], [[0.5, 0.5], [0.5, 0.5]]),
    )
    report = simulate(spec, RuleCoefficients.from_blocks((2, 2), 1, (1, 1)), count=50, seed=3)
    assert report.mean_cost == 0.0
    assert report.max_violation == 0.0
    assert report.feasibility_rate == 1.0


def test_forced_instance_exhaustive_mean_cost():
    spec = forced_instance()
    scenarios = exhaustive_scenarios(spec)
    assert scenarios.trajectories == [(1,), (2,)]
    report = simulate(spec, forced_rule(), scenarios=scenarios)
    assert report.mean_cost == pytest.approx(1.5)
    assert report.weighted_cost == pytest.approx(1.5)
    assert report.max_violation == 0.0


def test_violation_is_relative_to_rhs():
    spec = forced_instance()
    low = RuleCoefficients.from_blocks((2,), 1, (1,), {(1, 1): [[0.5], [2.0]]})
    sim = PolicySimulator(spec, low)
    assert sim.violations((1,), sim.decisions((1,)))[0] == pytest.approx(0.5)
    assert sim.violations((2,), sim.decisions((2,)))[0] == 0.0
    report = sim.simulate(exhaustive_scenarios(spec))
    assert report.feasibility_rate == 0.5
    assert report.mean_violation == [pytest.approx(0.25)]


def test_worst_case_scenario_cost():
    spec = forced_instance("worst")
    sim = PolicySimulator(spec, forced_rule())
    assert sim.cost(sim.decisions((2,))) == 2.0


def test_sampling_is_reproducible():
    spec = forced_instance()
    first = sample_scenarios(spec, 200, seed=11)
    second = sample_scenarios(spec, 200, seed=11)
    assert first.trajectories == second.trajectories
    assert sample_scenarios(spec, 200, seed=12).trajectories != first.trajectories
    a = simulate(spec, forced_rule(), count=100, seed=5)
    b = simulate(spec, forced_rule(), count=100, seed=5)
    assert a.to_json() == b.to_json()


def test_sampling_needs_a_distribution():
    spec = forced_instance("worst")
    with pytest.raises(ObjectiveError):
        sample_scenarios(spec, 10)


def test_expected_cost_closed_form():
    spec = forced_instance()
    assert expected_cost(spec, forced_rule()) == pytest.approx(1.5)
    assert expected_cost(spec, RuleCoefficients.from_blocks((2,), 1, (1,))) == 0.0
    with pytest.raises(ObjectiveError):
        expected_cost(forced_instance("worst"), forced_rule())


def test_expected_cost_equals_exhaustive_simulation(rng):
    spec = random_spec(rng, 3, (2, 3, 2), 2, (2, 1, 2), (1, 1, 1))
    rule = random_rule(rng, spec)
    report = simulate(spec, rule, scenarios=exhaustive_scenarios(spec))
    assert expected_cost(spec, rule) == pytest.approx(report.weighted_cost, rel=1e-12, abs=1e-12)


def test_expected_cost_equals_lp_value(forced):
    solution = solve_cddr(forced)
    assert expected_cost(forced, solution.rule) == pytest.approx(solution.value, rel=1e-9)


def test_exhaustive_size_guard(monkeypatch):
    monkeypatch.setenv("CDDR_MAX_TRAJECTORIES", "1")
    with pytest.raises(SizeGuardError):
        exhaustive_scenarios(forced_instance())


def test_rule_shape_is_checked():
    with pytest.raises(ShapeMismatchError):
        PolicySimulator(forced_instance(), RuleCoefficients.from_blocks((3,), 1, (1,)))


def test_report_renders_json_and_table():
    report = simulate(forced_instance(), forced_rule(), count=20, seed=1, keep_traces=True)
    payload = json.loads(report.to_json())
    assert payload["mean_cost"] == report.mean_cost
    assert len(payload["traces"]) == 20
    table = report.to_table()
    assert "mean_cost" in table
    assert list(report.to_frame().columns) == ["constraint", "mean_rel_violation"]
