"""Polytopic uncertainty: affine coordinates, poly-affine functions and the
reduction to the discrete problem over scenario trajectories.

Poly-affine coefficient tables reuse the additive-table layout with the
affine-basis sizes nu_t in place of the cardinalities d_t, so the index set
I_tau is a FragmentSpace over nu (padding stages have nu = 1).
"""
import functools
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import structlog
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .exceptions import InfeasibleProblemError, RankError, ShapeMismatchError, SolverError
from .lp import RowSense, SolveResult, SolveStatus, SparseLp
from .models import (
    AdditiveRhs,
    AdditiveTable,
    ObjectiveSpec,
    ProblemSpec,
    RuleCoefficients,
)
from .policy import SplitMix64
from .reformulate import AssembledLp, VariableFamily, build_lp
from .solvers import Solver, get_solver

logger = structlog.get_logger(__name__)


def _matrix(value: Any) -> np.ndarray:
    arr = np.array(value, dtype=float)
    arr.flags.writeable = False
    return arr


class PolytopeStage(BaseModel):
    """Support of one stage: the convex hull of ``vertices`` in R^dim."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    dim: int
    vertices: np.ndarray
    basis: Optional[np.ndarray] = None

    @field_validator("vertices", "basis", mode="before")
    @classmethod
    def _points(cls, value):
        if value is None:
            return None
        arr = np.array(value, dtype=float)
        if arr.ndim == 1:
            arr = arr.reshape(len(arr), -1) if arr.size else arr.reshape(len(arr), 0)
        arr.flags.writeable = False
        return arr

    @model_validator(mode="after")
    def _check(self) -> "PolytopeStage":
        if self.dim < 0:
            raise ValueError("dimension must be nonnegative")
        if self.vertices.ndim != 2 or self.vertices.shape[1] != self.dim or len(self.vertices) == 0:
            raise ShapeMismatchError(f"vertices must form a nonempty (d, {self.dim}) array")
        if self.basis is not None and self.basis.shape != (self.dim + 1, self.dim):
            raise ShapeMismatchError(f"an affine basis of R^{self.dim} has {self.dim + 1} points")
        return self

    @classmethod
    def from_vertices(cls, vertices: Any, basis: Any = None) -> "PolytopeStage":
        points = np.array(vertices, dtype=float)
        dim = points.shape[1] if points.ndim == 2 else 1
        stage = cls(dim=dim, vertices=points, basis=basis)
        stage.check_rank()
        return stage

    def check_rank(self) -> None:
        if _affine_rank(self.vertices) != self.dim:
            raise RankError(f"vertices do not affinely span R^{self.dim}")
        if self.basis is not None and _affine_rank(self.basis) != self.dim:
            raise RankError("basis points are not affinely independent")

    @property
    def nu(self) -> int:
        return self.dim + 1

    @property
    def d(self) -> int:
        return len(self.vertices)

    def basis_points(self) -> np.ndarray:
        if self.basis is not None:
            return self.basis
        return np.vstack([np.eye(self.dim), np.zeros((1, self.dim))])

    def vertex_lambdas(self) -> np.ndarray:
        return np.vstack([lambda_coords(self, v) for v in self.vertices])


def _affine_rank(points: np.ndarray) -> int:
    if len(points) <= 1 or points.shape[1] == 0:
        return 0
    return int(np.linalg.matrix_rank(points[1:] - points[0]))


def lambda_coords(stage: PolytopeStage, zeta: Any) -> np.ndarray:
    """Barycentric coordinates of ``zeta`` with respect to the stage's affine basis."""
    zeta = np.asarray(zeta, dtype=float).reshape(-1)
    if zeta.shape != (stage.dim,):
        raise ShapeMismatchError(f"point of dimension {zeta.size} for a stage of dimension {stage.dim}")
    if stage.basis is None:
        return np.append(zeta, 1.0 - zeta.sum())
    system = np.vstack([stage.basis.T, np.ones((1, stage.nu))])
    return np.linalg.solve(system, np.append(zeta, 1.0))


def multiaffine_weights(lambdas: Sequence[np.ndarray]) -> np.ndarray:
    """Products of coordinates over every kappa, flattened most-recent-fastest."""
    if not lambdas:
        return np.ones(1)
    return functools.reduce(np.multiply.outer, lambdas).reshape(-1)


class PolyAffineCoefficients(AdditiveTable):
    """Coefficients v^t_{tau kappa}; ``d`` holds nu_t, the affine-basis sizes."""

    @property
    def nu(self) -> Tuple[int, ...]:
        return self.d

    @property
    def v(self) -> Dict[Tuple[int, int], np.ndarray]:
        return self.coefficients


def _fragment_lambdas(
    stages: Sequence[PolytopeStage], points: Sequence[np.ndarray], tau: int, mu: int
) -> List[np.ndarray]:
    return [
        lambda_coords(stages[s - 1], points[s - 1]) if s >= 1 else np.ones(1)
        for s in range(tau - mu + 1, tau + 1)
    ]


def eval_polyaffine(
    coeffs: PolyAffineCoefficients, stages: Sequence[PolytopeStage], trajectory: Sequence[Any]
) -> np.ndarray:
    t = len(trajectory)
    if t == 0 or t > coeffs.N:
        raise ShapeMismatchError(f"trajectory of length {t} for {coeffs.N} stages")
    if tuple(s.nu for s in stages) != coeffs.nu:
        raise ShapeMismatchError("stage bases do not match the coefficient index sets")
    points = [np.asarray(z, dtype=float).reshape(-1) for z in trajectory]
    total = np.zeros(coeffs.widths[t - 1])
    for tau in range(1, t + 1):
        weights = multiaffine_weights(_fragment_lambdas(stages, points, tau, coeffs.mu))
        total = total + weights @ coeffs.block(t, tau)
    return total


def scenario_trajectory(stages: Sequence[PolytopeStage], trajectory: Sequence[int]) -> List[np.ndarray]:
    """zeta^t[xi^t]: vertex xi_s of every stage s."""
    return [stages[s].vertices[xi - 1] for s, xi in enumerate(trajectory)]


def _vertex_weights(stages: Sequence[PolytopeStage], tau: int, mu: int) -> np.ndarray:
    """Multiaffine weights of every scenario fragment of D_{tau-mu+1:tau}, one row each."""
    lams = [stages[s - 1].vertex_lambdas() if s >= 1 else np.ones((1, 1)) for s in range(tau - mu + 1, tau + 1)]
    rows = []
    for choice in np.ndindex(*(len(lam) for lam in lams)):
        rows.append(multiaffine_weights([lam[k] for lam, k in zip(lams, choice)]))
    return np.vstack(rows)


def _to_discrete_table(
    coeffs: PolyAffineCoefficients, stages: Sequence[PolytopeStage], table_type
):
    for stage in stages:
        stage.check_rank()
    d = tuple(stage.d for stage in stages)
    blocks = {}
    for tau in range(1, coeffs.N + 1):
        weights = _vertex_weights(stages, tau, coeffs.mu)
        for t in range(tau, coeffs.N + 1):
            block = coeffs.block(t, tau)
            blocks[(t, tau)] = np.vstack([w @ block for w in weights])
    return table_type(d=d, mu=coeffs.mu, widths=coeffs.widths, coefficients=blocks)


def v_to_u(coeffs: PolyAffineCoefficients, stages: Sequence[PolytopeStage]) -> RuleCoefficients:
    if tuple(s.nu for s in stages) != coeffs.nu:
        raise ShapeMismatchError("stage bases do not match the coefficient index sets")
    return _to_discrete_table(coeffs, stages, RuleCoefficients)


def affine_to_polyaffine(
    stages: Sequence[PolytopeStage],
    intercepts: Sequence[Any],
    slopes: Optional[Dict[Tuple[int, int], Any]] = None,
) -> PolyAffineCoefficients:
    """Memory-1 coefficients of b_t(zeta^t) = p_t + sum_{tau<=t} P^t_tau zeta_tau.

    Each coefficient is the affine map's value at a basis point; the intercept
    joins the tau = 1 term.
    """
    slopes = slopes or {}
    widths = tuple(len(np.atleast_1d(p)) for p in intercepts)
    N = len(stages)
    blocks = {}
    for t in range(1, N + 1):
        for tau in range(1, t + 1):
            points = stages[tau - 1].basis_points()
            P = slopes.get((t, tau))
            values = np.zeros((len(points), widths[t - 1]))
            if P is not None:
                P = np.asarray(P, dtype=float).reshape(widths[t - 1], stages[tau - 1].dim)
                values = values + points @ P.T
            if tau == 1:
                values = values + np.asarray(intercepts[t - 1], dtype=float)
            blocks[(t, tau)] = values
    return PolyAffineCoefficients(
        d=tuple(s.nu for s in stages), mu=1, widths=widths, coefficients=blocks
    )


class SampleObjective(BaseModel):
    """Weighted zeta-trajectory samples; cost sum_t f_t' x_t(zeta^t) is linear in v."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    costs: List[np.ndarray]
    samples: List[List[np.ndarray]]
    weights: np.ndarray

    @field_validator("costs", mode="before")
    @classmethod
    def _costs(cls, value):
        return [_matrix(c) for c in value]

    @field_validator("samples", mode="before")
    @classmethod
    def _samples(cls, value):
        return [[np.asarray(z, dtype=float).reshape(-1) for z in sample] for sample in value]

    @field_validator("weights", mode="before")
    @classmethod
    def _weights(cls, value):
        return _matrix(value)

    @model_validator(mode="after")
    def _check(self) -> "SampleObjective":
        if len(self.weights) != len(self.samples):
            raise ValueError("one weight per sample is required")
        if np.any(self.weights < 0):
            raise ValueError("sample weights must be nonnegative")
        return self


class PolytopicProblem(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    N: int
    n: Tuple[int, ...]
    m: Tuple[int, ...]
    A: Dict[Tuple[int, int], Any]
    stages: List[PolytopeStage]
    rhs_poly: PolyAffineCoefficients
    mu: int
    objective: ObjectiveSpec
    sample_objective: Optional[SampleObjective] = None

    @field_validator("A", mode="before")
    @classmethod
    def _sparse_blocks(cls, value):
        return {(int(t), int(tau)): sp.csr_matrix(block, dtype=float) for (t, tau), block in value.items()}

    @model_validator(mode="after")
    def _check(self) -> "PolytopicProblem":
        if len(self.stages) != self.N:
            raise ValueError(f"expected {self.N} stages, got {len(self.stages)}")
        if self.rhs_poly.N != self.N or self.rhs_poly.widths != self.m:
            raise ValueError("poly-affine right-hand side does not match the stage dimensions")
        if self.rhs_poly.nu != tuple(s.nu for s in self.stages):
            raise ValueError("poly-affine right-hand side is indexed over different bases")
        if self.rhs_poly.mu > self.mu:
            raise ValueError(f"right-hand side memory {self.rhs_poly.mu} exceeds mu={self.mu}")
        if self.sample_objective is not None:
            obj = self.sample_objective
            if len(obj.costs) != self.N or any(c.shape != (k,) for c, k in zip(obj.costs, self.n)):
                raise ValueError("sample costs must match the decision dimensions")
            for sample in obj.samples:
                if len(sample) != self.N or any(z.shape != (s.dim,) for z, s in zip(sample, self.stages)):
                    raise ValueError("every sample must be a full zeta trajectory")
        return self

    @property
    def nu(self) -> Tuple[int, ...]:
        return tuple(s.nu for s in self.stages)

    @property
    def d(self) -> Tuple[int, ...]:
        return tuple(s.d for s in self.stages)


def discretize(problem: PolytopicProblem) -> ProblemSpec:
    """The discrete problem over scenario trajectories, with rhs widened to mu."""
    rhs = _to_discrete_table(problem.rhs_poly, problem.stages, AdditiveRhs).widen(problem.mu)
    objective = problem.objective
    if problem.sample_objective is not None:
        objective = ObjectiveSpec.feasibility(problem.n)
    return ProblemSpec(
        N=problem.N,
        n=problem.n,
        m=problem.m,
        d=problem.d,
        A=problem.A,
        rhs=rhs,
        mu=problem.mu,
        objective=objective,
    )


class PolytopicSolution(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    v: PolyAffineCoefficients
    rule: RuleCoefficients
    value: float
    result: SolveResult


class PolytopicLpBuilder:
    """Extends the discrete CDDR LP with v columns and the v -> u equalities."""

    def __init__(self, problem: PolytopicProblem):
        self.problem = problem
        self.logger = structlog.get_logger(__name__)

    def _v_layout(self, start: int) -> Dict[Tuple[int, int], Tuple[int, int, int]]:
        problem = self.problem
        layout = {}
        col = start
        for t in range(1, problem.N + 1):
            for tau in range(1, t + 1):
                count = _index_set_size(problem.nu, tau, problem.mu)
                layout[(t, tau)] = (col, count, problem.n[t - 1])
                col += count * problem.n[t - 1]
        return layout

    def build(self) -> Tuple[SparseLp, AssembledLp, Dict[Tuple[int, int], Tuple[int, int, int]]]:
        problem = self.problem
        assembled = build_lp(discretize(problem))
        base = assembled.to_sparse()
        layout = self._v_layout(base.n_cols)
        n_total = base.n_cols + sum(count * width for _, count, width in layout.values())

        rows, cols, vals, names = [], [], [], []
        row = 0
        for (t, tau), (v_start, v_count, width) in layout.items():
            weights = _vertex_weights(problem.stages, tau, problem.mu)
            u = assembled.catalog.block(VariableFamily.U, t, tau)
            coupling = sp.kron(sp.csr_matrix(weights), sp.identity(width), format="coo")
            n_rows = u.size
            rows.append(row + np.arange(n_rows))
            cols.append(u.start + np.arange(n_rows))
            vals.append(np.ones(n_rows))
            rows.append(row + coupling.row)
            cols.append(v_start + coupling.col)
            vals.append(-coupling.data)
            names.extend(
                f"V2U_t{t}_tau{tau}_x{flat:03d}_c{i}" for flat in range(u.count) for i in range(1, width + 1)
            )
            row += n_rows
        link = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(row, n_total)
        ).tocsr()

        objective = np.zeros(n_total)
        objective[: base.n_cols] = base.objective
        if problem.sample_objective is not None:
            objective[: base.n_cols] = 0.0
            self._sample_costs(objective, layout)

        v_names = [
            f"V_t{t}_tau{tau}_k{flat:03d}_c{i}"
            for (t, tau), (_, count, width) in layout.items()
            for flat in range(count)
            for i in range(1, width + 1)
        ]
        matrix = sp.vstack([sp.hstack([base.matrix, sp.csr_matrix((base.n_rows, n_total - base.n_cols))]), link])
        lp = SparseLp(
            n_cols=n_total,
            objective=objective,
            matrix=matrix,
            senses=base.senses + (RowSense.EQ,) * row,
            rhs=np.concatenate([base.rhs, np.zeros(row)]),
            lower=np.full(n_total, -np.inf),
            upper=np.full(n_total, np.inf),
            col_names=base.col_names + tuple(v_names),
            row_names=base.row_names + tuple(names),
        )
        self.logger.info("polytopic_lp_assembled", columns=n_total, v_columns=n_total - base.n_cols, rows=lp.n_rows)
        return lp, assembled, layout

    def _sample_costs(self, objective: np.ndarray, layout) -> None:
        problem = self.problem
        obj = problem.sample_objective
        for sample, weight in zip(obj.samples, obj.weights):
            for (t, tau), (v_start, count, width) in layout.items():
                lams = _fragment_lambdas(problem.stages, sample, tau, problem.mu)
                contribution = weight * np.outer(multiaffine_weights(lams), obj.costs[t - 1]).reshape(-1)
                objective[v_start:v_start + count * width] += contribution


def _index_set_size(nu: Sequence[int], tau: int, mu: int) -> int:
    return int(np.prod([nu[s - 1] if s >= 1 else 1 for s in range(tau - mu + 1, tau + 1)]))


def solve_polytopic(problem: PolytopicProblem, solver: Union[str, Solver, None] = None) -> PolytopicSolution:
    solve = get_solver(solver or "reference") if solver is None or isinstance(solver, str) else solver
    lp, assembled, layout = PolytopicLpBuilder(problem).build()
    result = solve(lp)
    if result.status == SolveStatus.INFEASIBLE:
        raise InfeasibleProblemError("the scenario-trajectory reduction is infeasible")
    if not result.optimal:
        raise SolverError(f"polytopic LP not solved: {result.status.value} {result.message}".strip())
    blocks = {
        key: np.asarray(result.x[start:start + count * width]).reshape(count, width)
        for key, (start, count, width) in layout.items()
    }
    v = PolyAffineCoefficients(d=problem.nu, mu=problem.mu, widths=problem.n, coefficients=blocks)
    rule = v_to_u(v, problem.stages)
    logger.info("polytopic_solved", value=result.value, iterations=result.iterations)
    return PolytopicSolution(v=v, rule=rule, value=float(result.value), result=result)


def random_interior_point(stage: PolytopeStage, rng: SplitMix64) -> np.ndarray:
    """A random convex combination of the vertices (flat Dirichlet weights)."""
    draws = np.array([-np.log(1.0 - rng.next_float()) for _ in range(stage.d)])
    weights = draws / draws.sum()
    return weights @ stage.vertices


class InteriorCheck(BaseModel):
    trajectories: int
    max_violation: float
    worst_stage: Optional[int] = None

    def passed(self, tol: float = 1e-8) -> bool:
        return self.max_violation <= tol


def check_interior(
    problem: PolytopicProblem, v: PolyAffineCoefficients, count: int = 1000, seed: int = 0
) -> InteriorCheck:
    """Largest constraint excess of the poly-affine policy on random interior trajectories."""
    rng = SplitMix64(seed)
    worst, worst_stage = 0.0, None
    for _ in range(count):
        zeta = [random_interior_point(stage, rng) for stage in problem.stages]
        decisions: List[np.ndarray] = []
        for t in range(1, problem.N + 1):
            decisions.append(eval_polyaffine(v, problem.stages, zeta[:t]))
            lhs = np.zeros(problem.m[t - 1])
            for tau in range(1, t + 1):
                block = problem.A.get((t, tau))
                if block is not None:
                    lhs = lhs + block @ decisions[tau - 1]
            excess = float(np.max(lhs - eval_polyaffine(problem.rhs_poly, problem.stages, zeta[:t])))
            if excess > worst:
                worst, worst_stage = excess, t
    return InteriorCheck(trajectories=count, max_violation=max(worst, 0.0), worst_stage=worst_stage)
