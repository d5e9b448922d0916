import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from src.exceptions import InfeasibleProblemError, RankError, ShapeMismatchError
from src.models import ObjectiveSpec, eval_policy
from src.polytopic import (
    PolyAffineCoefficients,
    PolytopeStage,
    PolytopicProblem,
    SampleObjective,
    affine_to_polyaffine,
    check_interior,
    discretize,
    eval_polyaffine,
    lambda_coords,
    scenario_trajectory,
    solve_polytopic,
    v_to_u,
)
from src.reformulate import solve_cddr

UNIT = [[0.0], [1.0]]


def interval_problem(rng, N, mu=1, sample=None):
    """x_t in [p_t + sum_tau P_tau zeta_tau, 10] with zeta_tau in [0, 1]."""
    stages = [PolytopeStage.from_vertices(UNIT) for _ in range(N)]
    intercepts = [[10.0, -rng.uniform(0.0, 0.5)] for _ in range(N)]
    slopes = {(t, tau): [[0.0], [-rng.uniform(0.0, 0.5)]] for t in range(1, N + 1) for tau in range(1, t + 1)}
    A = {(t, t): [[1.0], [-1.0]] for t in range(1, N + 1)}
    return PolytopicProblem(
        N=N,
        n=(1,) * N,
        m=(2,) * N,
        A=A,
        stages=stages,
        rhs_poly=affine_to_polyaffine(stages, intercepts, slopes),
        mu=mu,
        objective=ObjectiveSpec.expected([[1.0]] * N, [[0.5, 0.5]] * N),
        sample_objective=sample,
    )


def random_poly_rule(rng, stages, mu, widths):
    nu = tuple(s.nu for s in stages)
    zero = PolyAffineCoefficients.from_blocks(nu, mu, widths)
    return PolyAffineCoefficients(
        d=nu, mu=mu, widths=widths,
        coefficients={key: rng.normal(size=block.shape) for key, block in zero.coefficients.items()},
    )


def test_lambda_coordinates_default_basis():
    stage = PolytopeStage.from_vertices(UNIT)
    assert_allclose(lambda_coords(stage, [0.3]), [0.3, 0.7])
    triangle = PolytopeStage.from_vertices([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert_allclose(lambda_coords(triangle, [0.2, 0.5]), [0.2, 0.5, 0.3])
    assert_array_equal(lambda_coords(triangle, [0.0, 0.0]), [0.0, 0.0, 1.0])
    with pytest.raises(ShapeMismatchError):
        lambda_coords(triangle, [0.1])


def test_lambda_coordinates_custom_basis_reproduce_point():
    stage = PolytopeStage.from_vertices(
        [[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]], basis=[[1.0, 1.0], [2.0, 0.0], [0.0, 0.0]]
    )
    lam = lambda_coords(stage, [0.5, 0.25])
    assert lam.sum() == pytest.approx(1.0)
    assert_allclose(lam @ stage.basis, [0.5, 0.25])


def test_rank_deficient_vertices():
    with pytest.raises(RankError):
        PolytopeStage.from_vertices([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])


def test_basis_shape_is_validated():
    with pytest.raises(ValidationError):
        PolytopeStage(dim=2, vertices=[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], basis=[[0.0, 0.0]])


def test_eval_polyaffine_two_term_example():
    stage = PolytopeStage.from_vertices(UNIT)
    coeffs = PolyAffineCoefficients.from_blocks((2,), 2, (1,), {(1, 1): [[10.0], [20.0]]})
    assert eval_polyaffine(coeffs, [stage], [[0.3]])[0] == pytest.approx(17.0)
    assert_array_equal(eval_polyaffine(PolyAffineCoefficients.from_blocks((2,), 1, (3,)), [stage], [[0.3]]), np.zeros(3))


def test_affine_encoding_matches_direct_evaluation(rng):
    stages = [PolytopeStage.from_vertices([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]) for _ in range(2)]
    p = [rng.normal(size=2), rng.normal(size=2)]
    P = {(t, tau): rng.normal(size=(2, 2)) for t in (1, 2) for tau in range(1, t + 1)}
    coeffs = affine_to_polyaffine(stages, p, P)
    for _ in range(20):
        zeta = [rng.uniform(size=2), rng.uniform(size=2)]
        direct = p[1] + P[(2, 1)] @ zeta[0] + P[(2, 2)] @ zeta[1]
        assert_allclose(eval_polyaffine(coeffs, stages, zeta), direct, atol=1e-12)


def test_discretize_evaluates_rhs_at_vertices():
    stages = [PolytopeStage.from_vertices(UNIT)]
    problem = PolytopicProblem(
        N=1, n=(1,), m=(1,), A={(1, 1): [[1.0]]}, stages=stages,
        rhs_poly=affine_to_polyaffine(stages, [[2.0]], {(1, 1): [[3.0]]}),
        mu=1, objective=ObjectiveSpec.feasibility((1,)),
    )
    spec = discretize(problem)
    assert_allclose(spec.rhs.block(1, 1).ravel(), [2.0, 5.0])
    assert spec.d == (2,)


def test_v_to_u_swaps_for_default_basis():
    stage = PolytopeStage.from_vertices(UNIT)
    coeffs = PolyAffineCoefficients.from_blocks((2,), 1, (1,), {(1, 1): [[4.0], [9.0]]})
    assert_array_equal(v_to_u(coeffs, [stage]).u[(1, 1)].ravel(), [9.0, 4.0])
    assert not v_to_u(PolyAffineCoefficients.from_blocks((2,), 1, (1,)), [stage]).u[(1, 1)].any()


def test_cross_evaluation_is_exact(rng):
    for mu in (1, 2):
        stages = [
            PolytopeStage.from_vertices(UNIT),
            PolytopeStage.from_vertices([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
            PolytopeStage.from_vertices([[-1.0], [0.5], [2.0]]),
        ]
        coeffs = random_poly_rule(rng, stages, mu, (2, 1, 3))
        rule = v_to_u(coeffs, stages)
        for traj in itertools.product(*(range(1, s.d + 1) for s in stages)):
            zeta = scenario_trajectory(stages, traj)
            for t in range(1, 4):
                assert_array_equal(eval_policy(rule, traj[:t]), eval_polyaffine(coeffs, stages, zeta[:t]))


def test_simplex_vertices_match_plain_discrete_solve(rng):
    problem = interval_problem(rng, 2)
    solution = solve_polytopic(problem)
    plain = solve_cddr(discretize(problem))
    assert solution.value == pytest.approx(plain.value, rel=1e-8)


def test_solved_policy_is_feasible_in_the_interior(rng):
    for mu in (1, 2):
        problem = interval_problem(rng, 3, mu=mu)
        solution = solve_polytopic(problem)
        check = check_interior(problem, solution.v, count=200, seed=mu)
        assert check.passed(1e-8)


def test_infeasible_reduction():
    stages = [PolytopeStage.from_vertices(UNIT)]
    problem = PolytopicProblem(
        N=1, n=(1,), m=(2,), A={(1, 1): [[1.0], [-1.0]]}, stages=stages,
        rhs_poly=affine_to_polyaffine(stages, [[0.0, -1.0]], {(1, 1): [[1.0], [-1.0]]}),
        mu=1, objective=ObjectiveSpec.feasibility((1,)),
    )
    with pytest.raises(InfeasibleProblemError):
        solve_polytopic(problem)


def test_sample_objective_prices_samples(rng):
    samples = [[[0.25], [0.5]], [[0.75], [0.1]]]
    sample = SampleObjective(costs=[[1.0], [1.0]], samples=samples, weights=[0.5, 0.5])
    problem = interval_problem(rng, 2, sample=sample)
    solution = solve_polytopic(problem)
    stages = problem.stages
    expected = sum(
        w * sum(eval_polyaffine(solution.v, stages, z[:t])[0] for t in (1, 2))
        for w, z in zip([0.5, 0.5], samples)
    )
    assert solution.value == pytest.approx(expected, rel=1e-8)


def test_rhs_memory_above_mu_is_rejected():
    stages = [PolytopeStage.from_vertices(UNIT)]
    with pytest.raises(ValidationError):
        PolytopicProblem(
            N=1, n=(1,), m=(1,), A={}, stages=stages,
            rhs_poly=PolyAffineCoefficients.from_blocks((2,), 2, (1,)),
            mu=1, objective=ObjectiveSpec.feasibility((1,)),
        )
