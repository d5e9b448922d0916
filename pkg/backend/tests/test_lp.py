import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from src.config import SolverTolerances
from src.exceptions import MpsFormatError
from src.lp import RowSense, SolveStatus, SparseLp, check_residuals, parse_mps, write_mps
from src.reformulate import build_lp
from src.simplex import solve_reference
from src.solvers import solve_highs

from conftest import random_spec, tracking_instance


def dense_lp(c, A, b, senses=None, lower=None, upper=None):
    A = np.asarray(A, dtype=float)
    rows, cols = np.nonzero(A)
    return SparseLp.from_triplets(
        n_cols=A.shape[1],
        objective=c,
        rows=rows,
        cols=cols,
        values=A[rows, cols],
        senses=senses or [RowSense.LE] * A.shape[0],
        rhs=b,
        lower=np.zeros(A.shape[1]) if lower is None else lower,
        upper=np.full(A.shape[1], np.inf) if upper is None else upper,
    )


def vertex_enumeration(c, A, b):
    """min c'x over {Ax <= b, x >= 0} by enumerating basic solutions (bounded problems)."""
    n = A.shape[1]
    G = np.vstack([A, -np.eye(n)])
    h = np.concatenate([b, np.zeros(n)])
    best = None
    for active in itertools.combinations(range(len(G)), n):
        sub = G[list(active)]
        if abs(np.linalg.det(sub)) < 1e-10:
            continue
        x = np.linalg.solve(sub, h[list(active)])
        if np.all(G @ x <= h + 1e-9):
            value = float(c @ x)
            best = value if best is None else min(best, value)
    return best


def test_small_textbook_lp():
    result = solve_reference(dense_lp([-1.0, -1.0], [[1.0, 1.0]], [1.0]))
    assert result.status == SolveStatus.OPTIMAL
    assert result.value == pytest.approx(-1.0)


def test_infeasible_lp():
    result = solve_reference(dense_lp([0.0], [[1.0]], [-1.0]))
    assert result.status == SolveStatus.INFEASIBLE
    assert result.x is None


def test_unbounded_lp():
    result = solve_reference(dense_lp([-1.0, 0.0], [[-1.0, 1.0]], [1.0]))
    assert result.status == SolveStatus.UNBOUNDED


def test_matches_vertex_enumeration(rng):
    for _ in range(100):
        n = int(rng.integers(2, 4))
        m = int(rng.integers(1, 4))
        A = np.round(rng.normal(size=(m, n)), 3)
        b = np.round(rng.normal(size=m) + 0.5, 3)
        A = np.vstack([A, np.ones((1, n))])
        b = np.append(b, 10.0)
        c = np.round(rng.normal(size=n), 3)
        expected = vertex_enumeration(c, A, b)
        result = solve_reference(dense_lp(c, A, b))
        if expected is None:
            assert result.status == SolveStatus.INFEASIBLE
        else:
            assert result.status == SolveStatus.OPTIMAL
            assert result.value == pytest.approx(expected, abs=1e-7)
            assert check_residuals(dense_lp(c, A, b), result.x) <= 1e-7


def test_equality_rows_and_free_columns():
    # min x + y  s.t.  x - y = 1,  x free,  0 <= y <= 3  ->  x = 1, y = 0
    lp = dense_lp(
        [1.0, 1.0], [[1.0, -1.0]], [1.0], senses=[RowSense.EQ],
        lower=[-np.inf, 0.0], upper=[np.inf, 3.0],
    )
    result = solve_reference(lp)
    assert result.status == SolveStatus.OPTIMAL
    assert_allclose(result.x, [1.0, 0.0], atol=1e-9)


def test_fixed_columns_are_respected():
    lp = dense_lp([1.0, 1.0], [[-1.0, -1.0]], [-3.0], lower=[2.0, 0.0], upper=[2.0, np.inf])
    result = solve_reference(lp)
    assert result.optimal
    assert_allclose(result.x, [2.0, 1.0], atol=1e-9)


def test_bland_pricing_reaches_same_optimum(rng):
    spec = tracking_instance(rng, 3, (2, 2, 2), mu=2)
    lp = build_lp(spec).to_sparse()
    dantzig = solve_reference(lp)
    bland = solve_reference(lp, SolverTolerances(pricing="bland"))
    assert dantzig.optimal and bland.optimal
    assert dantzig.value == pytest.approx(bland.value, rel=1e-9)


def test_iteration_limit_status(rng):
    lp = build_lp(tracking_instance(rng, 2, (2, 2))).to_sparse()
    result = solve_reference(lp, SolverTolerances(max_iterations=1))
    assert result.status == SolveStatus.ITERATION_LIMIT


def test_boxed_and_free_columns_match_highs(rng):
    for _ in range(10):
        m, n, n_free = 40, 60, 15
        A = rng.normal(size=(m, n))
        A[rng.uniform(size=A.shape) > 0.3] = 0.0
        lower = np.where(np.arange(n) < n_free, -np.inf, rng.uniform(-2.0, 0.0, size=n))
        upper = np.where(np.arange(n) < n_free, np.inf, lower + rng.uniform(0.5, 3.0, size=n))
        upper[n - 5:] = np.inf
        x0 = np.ones(n)
        boxed = np.isfinite(lower) & np.isfinite(upper)
        x0[boxed] = (lower[boxed] + upper[boxed]) / 2.0
        x0[:n_free] = rng.normal(size=n_free)
        # free columns are boxed by rows, so every instance is bounded
        box = np.vstack([np.eye(n)[:n_free], -np.eye(n)[:n_free], np.eye(n)[n - 5:]])
        A = np.vstack([A, box])
        b = A @ x0
        b[: m // 2] += rng.uniform(0.0, 1.0, size=m // 2)
        b[m:] = 10.0
        senses = [RowSense.LE] * (m // 2) + [RowSense.EQ] * (m - m // 2) + [RowSense.LE] * box.shape[0]
        lp = dense_lp(rng.normal(size=n), A, b, senses=senses, lower=lower, upper=upper)
        reference, highs = solve_reference(lp), solve_highs(lp)
        assert reference.optimal and highs.optimal
        assert reference.value == pytest.approx(highs.value, rel=1e-7, abs=1e-7)
        assert check_residuals(lp, reference.x) <= 1e-7
        assert np.all(reference.x >= lower) and np.all(reference.x <= upper)


def test_reruns_are_identical(rng):
    lp = build_lp(random_spec(rng, 2, (2, 2), 2, (2, 1), (2, 2))).to_sparse()
    first, second = solve_reference(lp), solve_reference(lp)
    assert first.status == second.status
    if first.optimal:
        assert first.x.tobytes() == second.x.tobytes()
    assert write_mps(lp) == write_mps(lp)


def test_mps_one_row_document():
    lp = dense_lp([0.0], [[1.0]], [1.0])
    text = write_mps(lp)
    rows = text.split("ROWS\n")[1].split("COLUMNS")[0].strip().splitlines()
    assert len(rows) == 2
    assert rows[0].split() == ["N", "COST"]


def test_mps_round_trip_is_exact(rng):
    spec = random_spec(rng, 3, (2, 3, 2), 2, (2, 1, 2), (2, 2, 1))
    lp = build_lp(spec).to_sparse()
    lower = np.full(lp.n_cols, -np.inf)
    upper = np.full(lp.n_cols, np.inf)
    lower[:3] = [0.0, -1.5, 1.0 / 3.0]
    upper[:3] = [np.inf, 2.0, 1.0 / 3.0]
    lp = lp.with_bounds(lower, upper)
    parsed = parse_mps(write_mps(lp))
    assert parsed.triplets() == lp.triplets()
    assert parsed.senses == lp.senses
    assert parsed.col_names == lp.col_names
    assert parsed.row_names == lp.row_names
    assert_array_equal(parsed.objective, lp.objective)
    assert_array_equal(parsed.rhs, lp.rhs)
    assert_array_equal(parsed.lower, lp.lower)
    assert_array_equal(parsed.upper, lp.upper)


def test_mps_rejects_name_collisions():
    lp = dense_lp([1.0, 1.0], [[1.0, 1.0]], [1.0])
    with pytest.raises(MpsFormatError):
        write_mps(lp, names=["X", "X"])
    with pytest.raises(MpsFormatError):
        write_mps(lp, names=["X", "has space"])


def test_parse_mps_rejects_ranges():
    text = "NAME T\nROWS\n N  COST\n L  R1\nCOLUMNS\n    X  R1  1\nRHS\n    RHS  R1  1\nRANGES\n    RNG  R1  2\nENDATA\n"
    with pytest.raises(MpsFormatError):
        parse_mps(text)


def test_sparse_lp_validates_shapes():
    with pytest.raises(ValidationError):
        SparseLp(
            n_cols=2, objective=[1.0], matrix=np.zeros((1, 2)), senses=(RowSense.LE,), rhs=[0.0],
            lower=[0.0, 0.0], upper=[1.0, 1.0],
        )
