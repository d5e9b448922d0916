import itertools
import time

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from src.exceptions import ShapeMismatchError, SpecValidationError
from src.hydro import (
    HydroConfig,
    ParModel,
    ParStage,
    column_count,
    default_instance,
    generate,
    row_count,
    run_par_recursion,
    stage_cost,
    stage_rhs,
    unroll_par,
)
from src.policy import exhaustive_scenarios, simulate
from src.reformulate import count_sizes, solve_cddr

from conftest import as_dense


def noise_of(model, trajectory):
    """zeta_2..zeta_N picked by a 1-based trajectory whose first entry is the stage-1 singleton."""
    return [np.asarray(model.noise[s - 2].support[trajectory[s - 1] - 1]) for s in range(2, model.N + 1)]


def test_dimensions_per_stage():
    for K in (1, 2, 3):
        params, model = default_instance(K=K, N=3, d=2)
        spec = generate(params, model)
        assert spec.n == (4 * K,) * 3
        assert spec.m == (9 * K,) * 3
        assert spec.mu == 1
        assert spec.d == (1, 2, 2)
        params, model = default_instance(K=K, N=3, d=2, relaxation=True)
        spec = generate(params, model)
        assert spec.n == (5 * K,) * 3
        assert spec.m == (10 * K,) * 3
        assert row_count(params) == 10 * K and column_count(params) == 5 * K


def test_unrolled_inflows_match_recursion(rng):
    K = 3
    stage = lambda: ParStage(
        lags=[rng.normal(scale=0.4, size=(K, K)).tolist(), rng.normal(scale=0.2, size=(K, K)).tolist()],
        scale=rng.normal(size=(K, K)).tolist(),
        support=[[0.0] * K],
        probabilities=[1.0],
    )
    model = ParModel(
        theta=rng.uniform(5.0, 10.0, size=(6, K)).tolist(),
        history=rng.normal(size=(2, K)).tolist(),
        noise=[stage() for _ in range(5)],
    )
    affine = unroll_par(model)
    for _ in range(100):
        noises = list(rng.normal(size=(5, K)))
        direct = run_par_recursion(model, noises)
        for t in range(1, model.N + 1):
            assert_allclose(affine.evaluate(t, noises), direct[t - 1], rtol=0.0, atol=1e-12)


def test_memoryless_noise_loads_only_the_current_stage():
    K = 2
    theta = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]
    noise = [ParStage(lags=[], scale=np.eye(K).tolist(), support=[[0.0, 0.0]], probabilities=[1.0])] * 2
    affine = unroll_par(ParModel(theta=theta, history=[[0.0, 0.0]], noise=noise))
    for t in (2, 3):
        assert_array_equal(affine.loadings[(t, t)], np.eye(K))
        for s in range(2, t):
            assert_array_equal(affine.loadings[(t, s)], np.zeros((K, K)))
    for t in (1, 2, 3):
        assert_array_equal(affine.intercepts[t - 1], theta[t - 1])


def test_history_must_reach_the_deepest_lag():
    lag = [[0.5]]
    model = ParModel(
        theta=[[1.0], [1.0]],
        history=[[0.0]],
        noise=[ParStage(lags=[lag, lag], scale=[[1.0]], support=[[0.0]], probabilities=[1.0])],
    )
    with pytest.raises(SpecValidationError):
        unroll_par(model)


def test_recursion_checks_noise_count():
    _, model = default_instance(K=1, N=3, d=2)
    with pytest.raises(ShapeMismatchError):
        run_par_recursion(model, [np.zeros(1)])


def test_par_model_validation():
    with pytest.raises(ValidationError):
        ParModel(
            theta=[[1.0], [1.0]],
            history=[[0.0]],
            noise=[ParStage(lags=[], scale=[[1.0]], support=[[0.0], [1.0]], probabilities=[0.7, 0.7])],
        )
    with pytest.raises(ValidationError):
        ParModel(theta=[], history=[[0.0]], noise=[])


def test_generated_rhs_follows_the_inflows():
    params, model = default_instance(K=2, N=4, d=2)
    spec = generate(params, model)
    for trajectory in itertools.product(*(range(1, k + 1) for k in spec.d)):
        inflows = run_par_recursion(model, noise_of(model, trajectory))
        for t in range(1, spec.N + 1):
            assert_allclose(
                spec.rhs.evaluate(trajectory[:t]), stage_rhs(params, t, inflows[t - 1]), rtol=1e-12, atol=1e-12
            )


def test_stage_blocks_and_costs():
    params, model = default_instance(K=2, N=3, d=2)
    spec = generate(params, model)
    current = as_dense(spec.block(2, 2))
    previous = as_dense(spec.block(2, 1))
    # water balance: h_t + v_t - v_{t-1}
    assert_array_equal(current[0, [0, 2]], [1.0, 1.0])
    assert_array_equal(previous[0], [0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    assert not previous[2:].any()
    cost = stage_cost(params, 2)
    assert_array_equal(cost[:4], np.zeros(4))
    assert_array_equal(cost[4:6], params.deficit_penalty[1])
    assert_array_equal(cost[6:], params.thermal_cost[1])


def test_terminal_level_floor():
    params, model = default_instance(K=1, N=2, d=2)
    rows = stage_rhs(params, 2, np.zeros(1))
    assert rows[3] == pytest.approx(-max(params.v_min[1][0], params.rho * params.v0[0]))


def test_mismatched_model_is_rejected():
    params, _ = default_instance(K=2, N=3, d=2)
    _, model = default_instance(K=2, N=4, d=2)
    with pytest.raises(ShapeMismatchError):
        generate(params, model)


def test_large_instance_counts_stay_within_bound():
    params, model = default_instance(K=4, N=12, d=10)
    spec = generate(params, model)
    assert spec.n[0] == 16
    assert spec.d == (1,) + (10,) * 11
    assert count_sizes(spec).within_bound()


@pytest.mark.parametrize("relaxation", [False, True])
def test_default_instance_solves_without_violations(relaxation):
    params, model = default_instance(K=2, N=6, d=3, relaxation=relaxation)
    spec = generate(params, model)
    started = time.perf_counter()
    solution = solve_cddr(spec, "reference")
    assert time.perf_counter() - started < 60.0
    assert solution.result.optimal
    assert solution.value > 0.0
    assert solution.value == pytest.approx(solve_cddr(spec, "highs").value, rel=1e-6)
    report = simulate(spec, solution.rule, scenarios=exhaustive_scenarios(spec))
    assert report.max_violation <= 1e-6
    assert report.weighted_cost == pytest.approx(solution.value, rel=1e-6)


def test_default_hydro_cap_is_below_net_demand():
    params, model = default_instance(K=2, N=6, d=3)
    spec = generate(params, model)
    for trajectory in itertools.product(*(range(1, k + 1) for k in spec.d)):
        inflows = run_par_recursion(model, noise_of(model, trajectory))
        for t, inflow in enumerate(inflows, start=1):
            assert np.all(inflow > 0.0)
            net = params.vec("demand", t) - (1.0 - params.vec("run_of_river", t)) * inflow
            assert np.all(net > params.vec("h_max", t))


@pytest.mark.slow
def test_reference_solver_handles_memory_two_hydro():
    params, model = default_instance(K=2, N=6, d=6)
    spec = generate(params, model).with_memory(2)
    started = time.perf_counter()
    solution = solve_cddr(spec, "reference")
    assert time.perf_counter() - started < 60.0
    assert solution.result.optimal
    assert solution.value == pytest.approx(solve_cddr(spec, "highs").value, rel=1e-6)


def test_config_document_resolves():
    params, model = HydroConfig(default={"K": 1, "N": 3, "d": 2, "seed": 5}).resolve()
    assert (params.K, params.N, model.N) == (1, 3, 3)
    explicit = HydroConfig(params=params, par=model).resolve()
    assert explicit == (params, model)
    with pytest.raises(ValidationError):
        HydroConfig()
    with pytest.raises(ValidationError):
        HydroConfig(params=params, par=model, default={"K": 1})
