"""Brute-force ground truth for desk-scale instances: trajectory maxima of the
linking residuals and the scenario-tree deterministic equivalent."""
import math
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import structlog
from pydantic import BaseModel, ConfigDict

from .config import get_settings
from .exceptions import InfeasibleProblemError, SizeGuardError, SolverError
from .lp import RowSense, SolveResult, SolveStatus, SparseLp
from .models import FragmentSpace, ObjectiveKind, ObjectiveSpec, ProblemSpec, RuleCoefficients
from .reformulate import build_discrete_lp, fix_rule, solve_cddr, z_root_lp, z_roots
from .solvers import Solver, get_solver

logger = structlog.get_logger(__name__)


def _align(spec: ProblemSpec, rule: RuleCoefficients) -> Tuple[ProblemSpec, RuleCoefficients]:
    mu = max(spec.mu, rule.mu)
    return spec.with_memory(mu), rule.widen(mu)


def _solver(solver: Union[str, Solver, None]) -> Solver:
    if solver is None or isinstance(solver, str):
        return get_solver(solver or "reference")
    return solver


def linking_residuals(spec: ProblemSpec, rule: RuleCoefficients, t: int) -> Dict[int, np.ndarray]:
    """y^t_{s xi} = sum_{tau=s..t} A^{t tau} u^tau_{s xi} - beta^t_{s xi}, one (|D_s|, m_t) array per s."""
    spec, rule = _align(spec, rule)
    out = {}
    for s in range(1, t + 1):
        y = -np.asarray(spec.rhs.block(t, s))
        for tau in range(s, t + 1):
            block = spec.block(t, tau)
            if block is not None:
                y = y + (block @ np.asarray(rule.block(tau, s)).T).T
        out[s] = y
    return out


def _trajectory_digits(d: Sequence[int]) -> np.ndarray:
    """0-based digits of every trajectory of D^t, lexicographic."""
    return np.indices(tuple(d)).reshape(len(d), -1).T


def max_partial_sum(d: Sequence[int], mu: int, residuals: Dict[int, np.ndarray], t: int) -> np.ndarray:
    """Entrywise max over xi^t of sum_s y_{s, xi_{s-mu+1:s}}."""
    total = math.prod(d[:t])
    limit = get_settings().max_trajectories
    if total > limit:
        raise SizeGuardError(f"{total} trajectories exceed the limit of {limit}")
    digits = _trajectory_digits(d[:t])
    acc = None
    for s in range(1, t + 1):
        space = FragmentSpace.build(s, mu, d)
        columns = [digits[:, r - 1] if r >= 1 else np.zeros(len(digits), dtype=np.int64) for r in space.stages]
        fragment = np.stack(columns, axis=1) if columns else np.zeros((len(digits), 0), dtype=np.int64)
        term = residuals[s][space.ravel(fragment)]
        acc = term if acc is None else acc + term
    return acc.max(axis=0)


def brute_force_max(spec: ProblemSpec, rule: RuleCoefficients, t: int) -> np.ndarray:
    spec, rule = _align(spec, rule)
    return max_partial_sum(spec.d, spec.mu, linking_residuals(spec, rule, t), t)


def minimal_z_root(
    spec: ProblemSpec, rule: RuleCoefficients, solver: Union[str, Solver, None] = None
) -> Dict[int, np.ndarray]:
    """Componentwise-minimal DP root values with u fixed, one vector per stage."""
    spec, rule = _align(spec, rule)
    lp, assembled = z_root_lp(spec, rule)
    result = _solver(solver)(lp)
    if not result.optimal:
        raise SolverError(f"z-root LP not solved: {result.status.value} {result.message}".strip())
    return z_roots(assembled, result.x)


class FeasibilityVerdict(BaseModel):
    lp_feasible: bool
    brute_feasible: bool
    maxima: Dict[int, List[float]]
    lp_status: SolveStatus

    @property
    def agree(self) -> bool:
        return self.lp_feasible == self.brute_feasible


def feasibility_verdict(
    spec: ProblemSpec, rule: RuleCoefficients, solver: Union[str, Solver, None] = None
) -> FeasibilityVerdict:
    """LP-extension feasibility of a fixed rule against the trajectory maxima."""
    spec, rule = _align(spec, rule)
    tol = get_settings().feasibility_tol
    maxima = {t: brute_force_max(spec, rule, t) for t in range(1, spec.N + 1)}
    brute = all(bool(np.all(v <= tol)) for v in maxima.values())
    plain = spec.with_objective(ObjectiveSpec.feasibility(spec.n))
    result = _solver(solver)(fix_rule(build_discrete_lp(plain), rule))
    if result.status not in (SolveStatus.OPTIMAL, SolveStatus.INFEASIBLE):
        raise SolverError(f"feasibility LP not decided: {result.status.value} {result.message}".strip())
    verdict = FeasibilityVerdict(
        lp_feasible=result.optimal,
        brute_feasible=brute,
        maxima={t: v.tolist() for t, v in maxima.items()},
        lp_status=result.status,
    )
    logger.info("feasibility_verdict", lp=verdict.lp_feasible, brute=verdict.brute_feasible)
    return verdict


# -- scenario tree ----------------------------------------------------------


def tree_nodes(d: Sequence[int]) -> List[Tuple[int, ...]]:
    """All nonempty prefixes of D^N in depth-first lexicographic order."""
    nodes: List[Tuple[int, ...]] = []

    def visit(prefix: Tuple[int, ...]) -> None:
        if prefix:
            nodes.append(prefix)
        if len(prefix) == len(d):
            return
        for value in range(1, d[len(prefix)] + 1):
            visit(prefix + (value,))

    visit(())
    return nodes


class TreeLp(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    lp: SparseLp
    nodes: List[Tuple[int, ...]]
    offsets: Dict[Tuple[int, ...], int]
    w_column: Optional[int] = None


def scenario_tree_lp(spec: ProblemSpec) -> TreeLp:
    """Deterministic equivalent over the prefix tree of D^N (nonanticipative by construction)."""
    n_nodes = sum(math.prod(spec.d[:t]) for t in range(1, spec.N + 1))
    limit = get_settings().max_tree_nodes
    if n_nodes > limit:
        raise SizeGuardError(f"{n_nodes} tree nodes exceed the limit of {limit}")
    nodes = tree_nodes(spec.d)
    offsets: Dict[Tuple[int, ...], int] = {}
    col = 0
    for node in nodes:
        offsets[node] = col
        col += spec.n[len(node) - 1]
    obj = spec.objective
    w_column = col if obj.kind == ObjectiveKind.WORST_CASE else None
    n_cols = col + (1 if w_column is not None else 0)

    rows, cols, vals, rhs, names = [], [], [], [], []
    row = 0
    for k, node in enumerate(nodes):
        t = len(node)
        for tau in range(1, t + 1):
            block = spec.block(t, tau)
            if block is None:
                continue
            coo = block.tocoo()
            rows.append(row + coo.row)
            cols.append(offsets[node[:tau]] + coo.col)
            vals.append(coo.data)
        rhs.append(spec.rhs.evaluate(node))
        names.extend(f"T_n{k:05d}_r{i}" for i in range(1, spec.m[t - 1] + 1))
        row += spec.m[t - 1]
    if w_column is not None:
        for k, node in enumerate(nodes):
            if len(node) != spec.N:
                continue
            for ell, h in enumerate(obj.functionals, start=1):
                for tau in range(1, spec.N + 1):
                    rows.append(np.full(spec.n[tau - 1], row))
                    cols.append(offsets[node[:tau]] + np.arange(spec.n[tau - 1]))
                    vals.append(h[tau - 1])
                rows.append(np.array([row]))
                cols.append(np.array([w_column]))
                vals.append(np.array([-1.0]))
                rhs.append(np.zeros(1))
                names.append(f"LEAF_n{k:05d}_l{ell}")
                row += 1

    objective = np.zeros(n_cols)
    if obj.kind == ObjectiveKind.EXPECTED:
        for node in nodes:
            t = len(node)
            prob = math.prod(float(obj.marginals[s][v - 1]) for s, v in enumerate(node))
            start = offsets[node]
            objective[start:start + spec.n[t - 1]] += prob * obj.costs[t - 1]
    elif obj.kind == ObjectiveKind.SAA:
        for scenario, weight in zip(obj.scenarios, obj.weights):
            for t in range(1, spec.N + 1):
                start = offsets[tuple(scenario[:t])]
                objective[start:start + spec.n[t - 1]] += weight * obj.costs[t - 1]
    else:
        objective[w_column] = 1.0

    matrix = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(row, n_cols)
    ).tocsr() if vals else sp.csr_matrix((row, n_cols))
    col_names = [f"X_n{k:05d}_c{i}" for k, node in enumerate(nodes) for i in range(1, spec.n[len(node) - 1] + 1)]
    if w_column is not None:
        col_names.append("W")
    lp = SparseLp(
        n_cols=n_cols,
        objective=objective,
        matrix=matrix,
        senses=(RowSense.LE,) * row,
        rhs=np.concatenate(rhs),
        lower=np.full(n_cols, -np.inf),
        upper=np.full(n_cols, np.inf),
        col_names=tuple(col_names),
        row_names=tuple(names),
        name="TREE",
    )
    return TreeLp(lp=lp, nodes=nodes, offsets=offsets, w_column=w_column)


class TreeSolution(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    value: float
    decisions: Dict[Tuple[int, ...], np.ndarray]
    result: SolveResult


def solve_tree(spec: ProblemSpec, solver: Union[str, Solver, None] = None) -> TreeSolution:
    tree = scenario_tree_lp(spec)
    result = _solver(solver)(tree.lp)
    if result.status == SolveStatus.INFEASIBLE:
        raise InfeasibleProblemError("the scenario-tree LP is infeasible")
    if not result.optimal:
        raise SolverError(f"scenario-tree LP not solved: {result.status.value} {result.message}".strip())
    decisions = {
        node: result.x[tree.offsets[node]:tree.offsets[node] + spec.n[len(node) - 1]] for node in tree.nodes
    }
    return TreeSolution(value=float(result.value), decisions=decisions, result=result)


class TreeVerdict(BaseModel):
    mu: int
    cddr_value: float
    tree_value: float

    @property
    def gap(self) -> float:
        return self.cddr_value - self.tree_value

    def equal(self, rel_tol: float = 1e-7) -> bool:
        return abs(self.gap) <= rel_tol * max(1.0, abs(self.tree_value))


def tree_verdict(spec: ProblemSpec, solver: Union[str, Solver, None] = None) -> TreeVerdict:
    """CDDR optimum at the problem's memory depth against the unrestricted tree optimum."""
    solve = _solver(solver)
    cddr = solve_cddr(spec, solve)
    tree = solve_tree(spec, solve)
    verdict = TreeVerdict(mu=spec.mu, cddr_value=cddr.value, tree_value=tree.value)
    logger.info("tree_verdict", mu=spec.mu, cddr=verdict.cddr_value, tree=verdict.tree_value, gap=verdict.gap)
    return verdict
