"""Assembly of the explicit LP whose feasible u-projections are the CDDRs.

Columns are laid out stage by stage; inside stage ``t`` come the U blocks
(rule coefficients of x_t), then the Y blocks (stage-t residual
contributions), then the Z blocks (DP bounds). The worst-case column W, when
present, is last. Every block is contiguous, fragment-major and
component-minor.

Equality rows (linking) precede inequality rows (DP recursion, then the root
rows of each stage).
"""
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import structlog
from pydantic import BaseModel, ConfigDict, PrivateAttr

from .exceptions import AssemblyError, InfeasibleProblemError, ObjectiveError, SolverError
from .lp import RowSense, SolveResult, SolveStatus, SparseLp
from .models import (
    AdditiveRhs,
    FragmentSpace,
    ObjectiveKind,
    ObjectiveSpec,
    ProblemSpec,
    RuleCoefficients,
    UncertainMatrixSpec,
    fragment_of,
)
from .solvers import Solver, get_solver

SIZE_CONSTANT = 20


class VariableFamily(str, Enum):
    U = "U"
    Y = "Y"
    Z = "Z"
    W = "W"


class VariableBlock(BaseModel):
    """A contiguous run of columns: ``count`` fragments times ``width`` components.

    ``index`` is the summand stage tau for U blocks and the stage s for Y and Z.
    """

    model_config = ConfigDict(frozen=True)

    family: VariableFamily
    t: int
    index: int
    start: int
    count: int
    width: int

    @property
    def size(self) -> int:
        return self.count * self.width

    @property
    def stop(self) -> int:
        return self.start + self.size

    def columns(self) -> np.ndarray:
        return np.arange(self.start, self.stop).reshape(self.count, self.width)

    def names(self) -> List[str]:
        if self.family == VariableFamily.U:
            pattern = "U_t{t}_tau{k}_x{flat:03d}_c{i}"
        elif self.family == VariableFamily.Y:
            pattern = "Y_t{t}_s{k}_x{flat:03d}_r{i}"
        else:
            pattern = "Z_t{t}_s{k}_e{flat:03d}_r{i}"
        return [
            pattern.format(t=self.t, k=self.index, flat=flat, i=i)
            for flat in range(self.count)
            for i in range(1, self.width + 1)
        ]


class VariableCatalog(BaseModel):
    model_config = ConfigDict(frozen=True)

    mu: int
    blocks: List[VariableBlock]
    n_cols: int
    w_column: Optional[int] = None
    memoryless: bool = False

    _lookup: Dict[Tuple[VariableFamily, int, int], VariableBlock] = PrivateAttr(default_factory=dict)

    def model_post_init(self, __context) -> None:
        self._lookup = {(b.family, b.t, b.index): b for b in self.blocks}

    def block(self, family: VariableFamily, t: int, index: int) -> VariableBlock:
        try:
            return self._lookup[(family, t, index)]
        except KeyError:
            raise AssemblyError(f"no {family.value} block for ({t}, {index})") from None

    def family(self, family: VariableFamily) -> List[VariableBlock]:
        return [b for b in self.blocks if b.family == family]

    def count(self, family: VariableFamily) -> int:
        if family == VariableFamily.W:
            return int(self.w_column is not None)
        return sum(b.size for b in self.family(family))

    def names(self) -> List[str]:
        names: List[str] = []
        for b in self.blocks:
            names.extend(b.names())
        if self.w_column is not None:
            names.append("W")
        return names


class SizeReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_u: int
    n_y: int
    n_z: int
    n_w: int = 0
    n_eq: int
    n_ineq: int
    bound: int

    @property
    def n_vars(self) -> int:
        return self.n_u + self.n_y + self.n_z + self.n_w

    def within_bound(self) -> bool:
        return self.n_vars <= self.bound


class AssembledLp(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    spec: ProblemSpec
    catalog: VariableCatalog
    counts: SizeReport
    objective: np.ndarray
    eq: sp.csr_matrix
    eq_rhs: np.ndarray
    ineq: sp.csr_matrix
    ineq_rhs: np.ndarray
    eq_names: List[str]
    ineq_names: List[str]
    functionals: Optional[List[List[np.ndarray]]] = None
    matrices: Optional[Dict[Tuple[int, int], List[Any]]] = None

    @property
    def n_cols(self) -> int:
        return self.catalog.n_cols

    def to_sparse(self, lower: Optional[np.ndarray] = None, upper: Optional[np.ndarray] = None) -> SparseLp:
        n_eq, n_ineq = self.eq.shape[0], self.ineq.shape[0]
        return SparseLp(
            n_cols=self.n_cols,
            objective=self.objective,
            matrix=sp.vstack([self.eq, self.ineq], format="csr"),
            senses=(RowSense.EQ,) * n_eq + (RowSense.LE,) * n_ineq,
            rhs=np.concatenate([self.eq_rhs, self.ineq_rhs]),
            lower=np.full(self.n_cols, -np.inf) if lower is None else lower,
            upper=np.full(self.n_cols, np.inf) if upper is None else upper,
            col_names=tuple(self.catalog.names()),
            row_names=tuple(self.eq_names + self.ineq_names),
        )


class _Triplets:
    def __init__(self):
        self.rows: List[np.ndarray] = []
        self.cols: List[np.ndarray] = []
        self.vals: List[np.ndarray] = []

    def add(self, rows, cols, vals) -> None:
        rows = np.asarray(rows, dtype=np.int64)
        self.rows.append(rows)
        self.cols.append(np.asarray(cols, dtype=np.int64))
        self.vals.append(np.broadcast_to(np.asarray(vals, dtype=float), rows.shape))

    def matrix(self, n_rows: int, n_cols: int) -> sp.csr_matrix:
        if not self.rows:
            return sp.csr_matrix((n_rows, n_cols))
        coo = sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(n_rows, n_cols),
        )
        matrix = coo.tocsr()
        matrix.sum_duplicates()
        return matrix


class CddrLpBuilder:
    """Assembles linking equalities and the DP inequality system for one spec.

    ``functionals`` adds the worst-case rows to stage N; ``matrices`` switches
    to memoryless rules with fragment-dependent technology matrices.
    """

    def __init__(
        self,
        spec: ProblemSpec,
        functionals: Optional[Sequence[Sequence[np.ndarray]]] = None,
        matrices: Optional[Dict[Tuple[int, int], List[sp.csr_matrix]]] = None,
        root_constraints: bool = True,
    ):
        self.spec = spec
        self.functionals = [list(h) for h in functionals] if functionals is not None else None
        self.matrices = matrices
        self.memoryless = matrices is not None
        self.root_constraints = root_constraints
        self.logger = structlog.get_logger(__name__)

        self.widths = list(spec.m)
        if self.functionals:
            self.widths[spec.N - 1] += len(self.functionals)

    # -- layout ------------------------------------------------------------

    def _taus(self, t: int) -> range:
        return range(t, t + 1) if self.memoryless else range(1, t + 1)

    def _layout(self) -> VariableCatalog:
        spec = self.spec
        blocks: List[VariableBlock] = []
        col = 0
        for t in range(1, spec.N + 1):
            width = self.widths[t - 1]
            for tau in self._taus(t):
                blocks.append(VariableBlock(
                    family=VariableFamily.U, t=t, index=tau, start=col,
                    count=spec.space(tau).size, width=spec.n[t - 1],
                ))
                col = blocks[-1].stop
            for s in range(1, t + 1):
                blocks.append(VariableBlock(
                    family=VariableFamily.Y, t=t, index=s, start=col,
                    count=spec.space(s).size, width=width,
                ))
                col = blocks[-1].stop
            for s in range(1, t + 1):
                blocks.append(VariableBlock(
                    family=VariableFamily.Z, t=t, index=s, start=col,
                    count=spec.space(s - 1, spec.mu - 1).size, width=width,
                ))
                col = blocks[-1].stop
        w_column = None
        if self.functionals:
            w_column = col
            col += 1
        return VariableCatalog(
            mu=spec.mu, blocks=blocks, n_cols=col, w_column=w_column, memoryless=self.memoryless
        )

    # -- stage data --------------------------------------------------------

    def _worst_rows(self, tau: int) -> sp.csr_matrix:
        return sp.csr_matrix(np.vstack([h[tau - 1] for h in self.functionals]))

    def _stage_matrix(self, t: int, tau: int) -> sp.csr_matrix:
        spec = self.spec
        block = spec.block(t, tau)
        if block is None:
            block = sp.csr_matrix((spec.m[t - 1], spec.n[tau - 1]))
        if self.functionals and t == spec.N:
            block = sp.vstack([block, self._worst_rows(tau)], format="csr")
        return block

    def _uncertain_matrices(self, t: int, s: int) -> List[sp.csr_matrix]:
        spec = self.spec
        size = spec.space(s).size
        family = self.matrices.get((t, s))
        if family is None:
            return [self._stage_matrix(t, s)] * size
        if len(family) != size:
            raise AssemblyError(
                f"matrices A^({t},{s})(xi) given for {len(family)} fragments, expected {size}"
            )
        shape = (spec.m[t - 1], spec.n[s - 1])
        out = []
        for k, mat in enumerate(family):
            if mat.shape != shape:
                raise AssemblyError(f"matrix A^({t},{s})(xi #{k}) has shape {mat.shape}, expected {shape}")
            if self.functionals and t == spec.N:
                mat = sp.vstack([mat, self._worst_rows(s)], format="csr")
            out.append(mat)
        return out

    def _stage_rhs(self, t: int, s: int) -> np.ndarray:
        beta = np.asarray(self.spec.rhs.block(t, s))
        if self.functionals and t == self.spec.N:
            beta = np.hstack([beta, np.zeros((beta.shape[0], len(self.functionals)))])
        return beta

    # -- assembly ----------------------------------------------------------

    def _linking(self, catalog: VariableCatalog) -> Tuple[sp.csr_matrix, np.ndarray, List[str]]:
        spec = self.spec
        trip = _Triplets()
        rhs_parts: List[np.ndarray] = []
        names: List[str] = []
        row = 0
        for t in range(1, spec.N + 1):
            width = self.widths[t - 1]
            for s in range(1, t + 1):
                size = spec.space(s).size
                n_rows = size * width
                y = catalog.block(VariableFamily.Y, t, s)
                trip.add(row + np.arange(n_rows), y.start + np.arange(n_rows), 1.0)
                if self.memoryless:
                    big = sp.block_diag(self._uncertain_matrices(t, s), format="coo")
                    u = catalog.block(VariableFamily.U, s, s)
                    trip.add(row + big.row, u.start + big.col, -big.data)
                else:
                    eye = sp.identity(size, format="csr")
                    for tau in range(s, t + 1):
                        block = self._stage_matrix(t, tau)
                        if block.nnz == 0:
                            continue
                        big = sp.kron(eye, block, format="coo")
                        u = catalog.block(VariableFamily.U, tau, s)
                        trip.add(row + big.row, u.start + big.col, -big.data)
                if self.functionals and t == spec.N and s == 1:
                    extra = row + np.arange(size)[:, None] * width + spec.m[t - 1] + np.arange(len(self.functionals))
                    trip.add(extra.ravel(), np.full(extra.size, catalog.w_column), 1.0)
                rhs_parts.append(-self._stage_rhs(t, s).reshape(-1))
                names.extend(
                    f"LNK_t{t}_s{s}_x{flat:03d}_r{i}" for flat in range(size) for i in range(1, width + 1)
                )
                row += n_rows
        rhs = np.concatenate(rhs_parts) if rhs_parts else np.zeros(0)
        return trip.matrix(row, catalog.n_cols), rhs, names

    def _dp_system(self, catalog: VariableCatalog) -> Tuple[sp.csr_matrix, np.ndarray, List[str]]:
        spec = self.spec
        trip = _Triplets()
        names: List[str] = []
        row = 0
        for t in range(1, spec.N + 1):
            width = self.widths[t - 1]
            for s in range(1, t + 1):
                size = spec.space(s).size
                flat = np.arange(size)
                # xi = (eta, xi_s) and xi = (xi_{s-mu+1}, next)
                eta = flat // spec.d[s - 1]
                nxt = flat % spec.space(s, spec.mu - 1).size
                rows = row + np.arange(size * width)
                comp = np.tile(np.arange(width), size)
                y = catalog.block(VariableFamily.Y, t, s)
                z = catalog.block(VariableFamily.Z, t, s)
                trip.add(rows, y.start + np.repeat(flat, width) * width + comp, 1.0)
                trip.add(rows, z.start + np.repeat(eta, width) * width + comp, -1.0)
                if s < t:
                    z_next = catalog.block(VariableFamily.Z, t, s + 1)
                    trip.add(rows, z_next.start + np.repeat(nxt, width) * width + comp, 1.0)
                names.extend(
                    f"DP_t{t}_s{s}_x{k:03d}_r{i}" for k in range(size) for i in range(1, width + 1)
                )
                row += size * width
            if self.root_constraints:
                root = catalog.block(VariableFamily.Z, t, 1)
                trip.add(row + np.arange(width), root.start + np.arange(width), 1.0)
                names.extend(f"ROOT_t{t}_r{i}" for i in range(1, width + 1))
                row += width
        return trip.matrix(row, catalog.n_cols), np.zeros(row), names

    def _objective(self, catalog: VariableCatalog) -> np.ndarray:
        spec = self.spec
        objective = np.zeros(catalog.n_cols)
        if self.functionals:
            objective[catalog.w_column] = 1.0
            return objective
        obj = spec.objective
        if obj.kind == ObjectiveKind.EXPECTED:
            for t in range(1, spec.N + 1):
                cost = obj.costs[t - 1]
                for tau in self._taus(t):
                    u = catalog.block(VariableFamily.U, t, tau)
                    probs = spec.space(tau).probabilities(obj.marginals)
                    objective[u.start:u.stop] += np.outer(probs, cost).ravel()
        elif obj.kind == ObjectiveKind.SAA:
            for scenario, weight in zip(obj.scenarios, obj.weights):
                for t in range(1, spec.N + 1):
                    cost = obj.costs[t - 1]
                    for tau in self._taus(t):
                        u = catalog.block(VariableFamily.U, t, tau)
                        flat = spec.space(tau).index(fragment_of(scenario, tau, spec.mu))
                        start = u.start + flat * u.width
                        objective[start:start + u.width] += weight * cost
        return objective

    def build(self) -> AssembledLp:
        catalog = self._layout()
        objective = self._objective(catalog)
        eq, eq_rhs, eq_names = self._linking(catalog)
        ineq, ineq_rhs, ineq_names = self._dp_system(catalog)
        spec = self.spec
        counts = SizeReport(
            n_u=catalog.count(VariableFamily.U),
            n_y=catalog.count(VariableFamily.Y),
            n_z=catalog.count(VariableFamily.Z),
            n_w=catalog.count(VariableFamily.W),
            n_eq=eq.shape[0],
            n_ineq=ineq.shape[0],
            bound=_size_bound(spec),
        )
        self.logger.info(
            "lp_assembled",
            N=spec.N,
            mu=spec.mu,
            columns=catalog.n_cols,
            equalities=counts.n_eq,
            inequalities=counts.n_ineq,
            worst_case=bool(self.functionals),
            memoryless=self.memoryless,
        )
        return AssembledLp(
            spec=spec,
            catalog=catalog,
            counts=counts,
            objective=objective,
            eq=eq,
            eq_rhs=eq_rhs,
            ineq=ineq,
            ineq_rhs=ineq_rhs,
            eq_names=eq_names,
            ineq_names=ineq_names,
            functionals=self.functionals,
            matrices=self.matrices,
        )


def _size_bound(spec: ProblemSpec) -> int:
    return SIZE_CONSTANT * (max(spec.m) + max(spec.n)) * spec.N ** 2 * max(spec.d) ** spec.mu


def build_discrete_lp(spec: ProblemSpec, allow_worst_case: bool = False) -> AssembledLp:
    """Linking equalities plus DP inequalities for rules additive with memory mu.

    A worst-case objective is only accepted with ``allow_worst_case``; the
    objective row is then left at zero for add_worstcase to fill.
    """
    if spec.objective.kind == ObjectiveKind.WORST_CASE and not allow_worst_case:
        raise ObjectiveError("worst-case objective requires add_worstcase (or build_lp)")
    return CddrLpBuilder(spec).build()


def add_worstcase(lp: AssembledLp, functionals: Sequence[Sequence[np.ndarray]]) -> AssembledLp:
    """Add a column w and the rows sum_t h_l' x_t <= w to stage N; minimize w."""
    if lp.functionals is not None:
        raise AssemblyError("the worst-case column is already present")
    functionals = [[np.asarray(v, dtype=float) for v in h] for h in functionals]
    if not functionals:
        raise ObjectiveError("at least one worst-case functional is required")
    spec = lp.spec
    for h in functionals:
        if len(h) != spec.N or any(v.shape != (k,) for v, k in zip(h, spec.n)):
            raise AssemblyError("worst-case functionals must match the decision dimensions")
    return CddrLpBuilder(spec, functionals=functionals, matrices=lp.matrices).build()


def build_memoryless_uncertain_matrix_lp(problem: UncertainMatrixSpec) -> AssembledLp:
    """Memoryless rules x_t = u^t_{xi_{t-mu+1:t}} under matrices A^{ts}(xi).

    Pairs (t, s) absent from ``problem.matrices`` use the fixed block A^{ts}.
    """
    spec = problem.base
    functionals = None
    if spec.objective.kind == ObjectiveKind.WORST_CASE:
        functionals = spec.objective.functionals
    return CddrLpBuilder(spec, functionals=functionals, matrices=dict(problem.matrices)).build()


def build_lp(spec: ProblemSpec) -> AssembledLp:
    if spec.objective.kind == ObjectiveKind.WORST_CASE:
        base = build_discrete_lp(spec, allow_worst_case=True)
        return add_worstcase(base, spec.objective.functionals)
    return build_discrete_lp(spec)


def count_sizes(spec: ProblemSpec, worstcase_rows: int = 0, memoryless: bool = False) -> SizeReport:
    N, mu = spec.N, spec.mu

    def size(s: int, depth: int = mu) -> int:
        return FragmentSpace.build(s, depth, spec.d).size

    m = list(spec.m)
    m[N - 1] += worstcase_rows
    n_u = n_y = n_z = n_ineq = 0
    for t in range(1, N + 1):
        taus = [t] if memoryless else range(1, t + 1)
        n_u += sum(spec.n[t - 1] * size(tau) for tau in taus)
        stage_y = sum(m[t - 1] * size(s) for s in range(1, t + 1))
        n_y += stage_y
        n_z += sum(m[t - 1] * size(s - 1, mu - 1) for s in range(1, t + 1))
        n_ineq += stage_y + m[t - 1]
    return SizeReport(
        n_u=n_u,
        n_y=n_y,
        n_z=n_z,
        n_w=int(worstcase_rows > 0),
        n_eq=n_y,
        n_ineq=n_ineq,
        bound=_size_bound(spec),
    )


# -- rule handling ----------------------------------------------------------


def fix_rule(lp: AssembledLp, rule: RuleCoefficients) -> SparseLp:
    """The LP with every U column fixed to the given rule coefficients."""
    catalog = lp.catalog
    if rule.mu < catalog.mu:
        rule = rule.widen(catalog.mu)
    elif rule.mu > catalog.mu:
        raise AssemblyError(f"rule memory {rule.mu} exceeds the LP memory {catalog.mu}")
    lower = np.full(catalog.n_cols, -np.inf)
    upper = np.full(catalog.n_cols, np.inf)
    for block in catalog.family(VariableFamily.U):
        values = np.asarray(rule.block(block.t, block.index)).reshape(-1)
        lower[block.start:block.stop] = values
        upper[block.start:block.stop] = values
    return lp.to_sparse(lower, upper)


def extract_rule(lp: AssembledLp, x: np.ndarray) -> RuleCoefficients:
    spec = lp.spec
    blocks = {
        (b.t, b.index): np.asarray(x[b.start:b.stop]).reshape(b.count, b.width)
        for b in lp.catalog.family(VariableFamily.U)
    }
    return RuleCoefficients.from_blocks(spec.d, spec.mu, spec.n, blocks)


def z_root_lp(spec: ProblemSpec, rule: RuleCoefficients) -> Tuple[SparseLp, AssembledLp]:
    """Linking and DP rows without the root rows, u fixed, minimizing the z roots."""
    spec = spec.with_objective(ObjectiveSpec.feasibility(spec.n))
    assembled = CddrLpBuilder(spec, root_constraints=False).build()
    objective = np.zeros(assembled.n_cols)
    for t in range(1, spec.N + 1):
        root = assembled.catalog.block(VariableFamily.Z, t, 1)
        objective[root.start:root.stop] = 1.0
    fixed = fix_rule(assembled, rule)
    return fixed.with_objective(objective), assembled


def z_roots(assembled: AssembledLp, x: np.ndarray) -> Dict[int, np.ndarray]:
    return {
        t: np.asarray(x[b.start:b.stop])
        for t in range(1, assembled.spec.N + 1)
        for b in [assembled.catalog.block(VariableFamily.Z, t, 1)]
    }


# -- solving and diagnosis --------------------------------------------------


def truncate(spec: ProblemSpec, T: int, rows: Optional[Sequence[int]] = None) -> ProblemSpec:
    """Stages 1..T with a zero objective; ``rows`` selects 0-based rows of stage T."""
    rows = list(range(spec.m[T - 1])) if rows is None else list(rows)
    m = spec.m[:T - 1] + (len(rows),)
    A = {}
    for (t, tau), block in spec.A.items():
        if t < T:
            A[(t, tau)] = block
        elif t == T:
            A[(t, tau)] = block[rows]
    beta = {}
    for t in range(1, T + 1):
        for s in range(1, t + 1):
            block = np.asarray(spec.rhs.block(t, s))
            beta[(t, s)] = block[:, rows] if t == T else block
    rhs = AdditiveRhs(d=spec.d[:T], mu=spec.mu, widths=m, coefficients=beta)
    return ProblemSpec(
        N=T,
        n=spec.n[:T],
        m=m,
        d=spec.d[:T],
        A=A,
        rhs=rhs,
        mu=spec.mu,
        objective=ObjectiveSpec.feasibility(spec.n[:T]),
    )


def _resolve(solver: Union[str, Solver, None]) -> Solver:
    if solver is None or isinstance(solver, str):
        return get_solver(solver or "reference")
    return solver


def diagnose_infeasibility(
    spec: ProblemSpec, solver: Union[str, Solver, None] = None
) -> Tuple[Optional[int], Optional[int]]:
    """First stage T whose prefix 1..T is infeasible, and the first single row
    of stage T that is infeasible together with stages 1..T-1 (1-based)."""
    solve = _resolve(solver)
    for T in range(1, spec.N + 1):
        prefix = build_discrete_lp(truncate(spec, T)).to_sparse()
        if solve(prefix).status != SolveStatus.INFEASIBLE:
            continue
        for i in range(spec.m[T - 1]):
            single = build_discrete_lp(truncate(spec, T, [i])).to_sparse()
            if solve(single).status == SolveStatus.INFEASIBLE:
                return T, i + 1
        return T, None
    return None, None


class CddrSolution(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    rule: RuleCoefficients
    value: float
    result: SolveResult
    assembled: AssembledLp

    @property
    def worst_case_value(self) -> Optional[float]:
        w = self.assembled.catalog.w_column
        return None if w is None else float(self.result.x[w])


def solve_assembled(assembled: AssembledLp, solver: Union[str, Solver, None] = None) -> CddrSolution:
    solve = _resolve(solver)
    result = solve(assembled.to_sparse())
    if result.status == SolveStatus.INFEASIBLE:
        stage, row = (None, None) if assembled.catalog.memoryless else diagnose_infeasibility(assembled.spec, solve)
        where = f" (first violated stage {stage}" + (f", row {row})" if row else ")") if stage else ""
        raise InfeasibleProblemError(f"the CDDR LP is infeasible{where}", stage=stage, row=row)
    if not result.optimal:
        raise SolverError(f"solver stopped with status {result.status.value}: {result.message}")
    return CddrSolution(
        rule=extract_rule(assembled, result.x),
        value=float(result.value),
        result=result,
        assembled=assembled,
    )


def solve_cddr(spec: ProblemSpec, solver: Union[str, Solver, None] = None) -> CddrSolution:
    return solve_assembled(build_lp(spec), solver)

