"""Sparse LP container, solve results and the MPS text format.

MPS documents keep the fixed-format section order and field alignment. Names
are any non-blank tokens (they are not limited to 8 characters) and numbers
are written with 17 significant digits, so the parser splits on whitespace and
round-trips every coefficient exactly.
"""
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .exceptions import MpsFormatError


def _readonly_vector(value: Any) -> np.ndarray:
    arr = np.array(value, dtype=float).reshape(-1)
    arr.flags.writeable = False
    return arr


class RowSense(str, Enum):
    LE = "L"
    EQ = "E"


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"
    ITERATION_LIMIT = "iteration_limit"
    SOLVER_ERROR = "solver_error"


class SparseLp(BaseModel):
    """min c'x  s.t.  rows (<= or =) rhs,  lower <= x <= upper."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    n_cols: int
    objective: np.ndarray
    matrix: Any
    senses: Tuple[RowSense, ...]
    rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    col_names: Optional[Tuple[str, ...]] = None
    row_names: Optional[Tuple[str, ...]] = None
    name: str = "CDDR"

    @field_validator("objective", "rhs", "lower", "upper", mode="before")
    @classmethod
    def _vector(cls, value: Any) -> np.ndarray:
        return _readonly_vector(value)

    @field_validator("matrix", mode="before")
    @classmethod
    def _csr(cls, value: Any) -> sp.csr_matrix:
        matrix = sp.csr_matrix(value, dtype=float)
        matrix.sum_duplicates()
        matrix.eliminate_zeros()
        return matrix

    @model_validator(mode="after")
    def _check(self) -> "SparseLp":
        n_rows = len(self.senses)
        if self.matrix.shape != (n_rows, self.n_cols):
            raise ValueError(f"matrix shape {self.matrix.shape} != ({n_rows}, {self.n_cols})")
        for name in ("objective", "lower", "upper"):
            if getattr(self, name).shape != (self.n_cols,):
                raise ValueError(f"{name} must have one entry per column")
        if self.rhs.shape != (n_rows,):
            raise ValueError("rhs must have one entry per row")
        if not (np.all(np.isfinite(self.objective)) and np.all(np.isfinite(self.rhs))):
            raise ValueError("objective and rhs must be finite")
        if not np.all(np.isfinite(self.matrix.data)):
            raise ValueError("matrix has non-finite coefficients")
        if np.any(np.isnan(self.lower)) or np.any(np.isnan(self.upper)):
            raise ValueError("bounds must not be NaN")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound above upper bound")
        if self.col_names is not None and len(self.col_names) != self.n_cols:
            raise ValueError("one name per column is required")
        if self.row_names is not None and len(self.row_names) != n_rows:
            raise ValueError("one name per row is required")
        return self

    @classmethod
    def from_triplets(
        cls,
        n_cols: int,
        objective: Any,
        rows: Any,
        cols: Any,
        values: Any,
        senses: Sequence[RowSense],
        rhs: Any,
        lower: Any = None,
        upper: Any = None,
        **names: Any,
    ) -> "SparseLp":
        """Duplicate (row, col) triplets are summed."""
        n_rows = len(senses)
        matrix = sp.coo_matrix(
            (np.asarray(values, dtype=float), (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))),
            shape=(n_rows, n_cols),
        ).tocsr()
        return cls(
            n_cols=n_cols,
            objective=objective,
            matrix=matrix,
            senses=tuple(senses),
            rhs=rhs,
            lower=np.full(n_cols, -np.inf) if lower is None else lower,
            upper=np.full(n_cols, np.inf) if upper is None else upper,
            **names,
        )

    @property
    def n_rows(self) -> int:
        return len(self.senses)

    def triplets(self) -> List[Tuple[int, int, float]]:
        coo = self.matrix.tocoo()
        return sorted(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))

    def with_bounds(self, lower: np.ndarray, upper: np.ndarray) -> "SparseLp":
        return self.model_copy(update={"lower": _readonly_vector(lower), "upper": _readonly_vector(upper)})

    def with_objective(self, objective: np.ndarray) -> "SparseLp":
        return self.model_copy(update={"objective": _readonly_vector(objective)})

    def column_name(self, j: int) -> str:
        return self.col_names[j] if self.col_names is not None else f"C{j}"

    def row_name(self, i: int) -> str:
        return self.row_names[i] if self.row_names is not None else f"R{i}"


class SolveResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    status: SolveStatus
    value: Optional[float] = None
    x: Optional[np.ndarray] = None
    iterations: int = 0
    solver: str = "reference"
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status == SolveStatus.OPTIMAL


def check_residuals(lp: SparseLp, x: np.ndarray) -> float:
    """Largest violation of any row or bound at ``x`` (0 when feasible)."""
    activity = lp.matrix @ x
    excess = activity - lp.rhs
    senses = np.array([s.value for s in lp.senses])
    row_viol = np.where(senses == RowSense.EQ.value, np.abs(excess), np.maximum(excess, 0.0))
    bound_viol = np.maximum(np.maximum(lp.lower - x, x - lp.upper), 0.0)
    worst = 0.0
    if row_viol.size:
        worst = max(worst, float(row_viol.max()))
    if bound_viol.size:
        worst = max(worst, float(bound_viol.max()))
    return worst


# --- MPS -----------------------------------------------------------------

OBJECTIVE_ROW = "COST"
RHS_SET = "RHS"
BOUND_SET = "BND"


def _num(value: float) -> str:
    return f"{value:.17g}"


def _field_line(code: str, name: str, pairs: Sequence[Tuple[str, str]]) -> str:
    # fields start at columns 2, 5, 15, 25, 40, 50 of the fixed format
    line = f" {code:<2} {name:<8}  "
    first = True
    for key, value in pairs:
        if not first:
            line += "   "
        line += f"{key:<8}  {value:>12}"
        first = False
    return line.rstrip()


def write_mps(lp: SparseLp, names: Optional[Sequence[str]] = None) -> str:
    col_names = list(names) if names is not None else [lp.column_name(j) for j in range(lp.n_cols)]
    row_names = [lp.row_name(i) for i in range(lp.n_rows)]
    all_names = col_names + row_names + [OBJECTIVE_ROW]
    if len(set(col_names)) != len(col_names) or len(set(row_names + [OBJECTIVE_ROW])) != lp.n_rows + 1:
        raise MpsFormatError("column or row names collide")
    if any((not name) or any(ch.isspace() for ch in name) for name in all_names):
        raise MpsFormatError("names must be non-empty and free of whitespace")

    lines = [f"NAME          {lp.name}", "ROWS", f" N  {OBJECTIVE_ROW}"]
    for sense, name in zip(lp.senses, row_names):
        lines.append(f" {sense.value}  {name}")

    lines.append("COLUMNS")
    csc = lp.matrix.tocsc()
    for j in range(lp.n_cols):
        entries: List[Tuple[str, str]] = []
        if lp.objective[j] != 0.0:
            entries.append((OBJECTIVE_ROW, _num(lp.objective[j])))
        start, stop = csc.indptr[j], csc.indptr[j + 1]
        for i, value in zip(csc.indices[start:stop], csc.data[start:stop]):
            if value != 0.0:
                entries.append((row_names[i], _num(value)))
        if not entries:
            # keep empty columns visible so the column set round-trips
            entries.append((OBJECTIVE_ROW, _num(0.0)))
        for k in range(0, len(entries), 2):
            lines.append(_field_line("", col_names[j], entries[k:k + 2]))

    lines.append("RHS")
    rhs_entries = [(row_names[i], _num(v)) for i, v in enumerate(lp.rhs) if v != 0.0]
    for k in range(0, len(rhs_entries), 2):
        lines.append(_field_line("", RHS_SET, rhs_entries[k:k + 2]))

    lines.append("RANGES")

    lines.append("BOUNDS")
    for j, (lo, up) in enumerate(zip(lp.lower, lp.upper)):
        name = col_names[j]
        if lo == up:
            lines.append(_field_line("FX", BOUND_SET, [(name, _num(lo))]))
            continue
        if np.isneginf(lo) and np.isposinf(up):
            lines.append(_field_line("FR", BOUND_SET, [(name, "")]))
            continue
        if np.isneginf(lo):
            lines.append(_field_line("MI", BOUND_SET, [(name, "")]))
        elif lo != 0.0:
            lines.append(_field_line("LO", BOUND_SET, [(name, _num(lo))]))
        if not np.isposinf(up):
            lines.append(_field_line("UP", BOUND_SET, [(name, _num(up))]))
    lines.append("ENDATA")
    return "\n".join(lines) + "\n"


def parse_mps(text: str) -> SparseLp:
    name = "CDDR"
    section = None
    objective_row: Optional[str] = None
    row_index: Dict[str, int] = {}
    senses: List[RowSense] = []
    row_names: List[str] = []
    col_index: Dict[str, int] = {}
    col_names: List[str] = []
    objective: Dict[int, float] = {}
    triplets: List[Tuple[int, int, float]] = []
    rhs: Dict[int, float] = {}
    bounds: List[Tuple[str, str, Optional[float]]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.startswith("*"):
            continue
        if not raw[0].isspace():
            head = raw.split()
            section = head[0].upper()
            if section == "NAME":
                name = head[1] if len(head) > 1 else name
            elif section == "ENDATA":
                break
            elif section not in ("ROWS", "COLUMNS", "RHS", "RANGES", "BOUNDS"):
                raise MpsFormatError(f"line {lineno}: unknown section {section}")
            continue

        fields = raw.split()
        try:
            if section == "ROWS":
                code, row = fields[0].upper(), fields[1]
                if code == "N":
                    if objective_row is None:
                        objective_row = row
                    continue
                if code not in ("L", "E"):
                    raise MpsFormatError(f"line {lineno}: row type {code} is not supported")
                if row in row_index:
                    raise MpsFormatError(f"line {lineno}: duplicate row {row}")
                row_index[row] = len(senses)
                senses.append(RowSense(code))
                row_names.append(row)
            elif section == "COLUMNS":
                col = fields[0]
                if col not in col_index:
                    col_index[col] = len(col_names)
                    col_names.append(col)
                j = col_index[col]
                for row, value in zip(fields[1::2], fields[2::2]):
                    if row == objective_row:
                        objective[j] = objective.get(j, 0.0) + float(value)
                    elif row in row_index:
                        triplets.append((row_index[row], j, float(value)))
                    else:
                        raise MpsFormatError(f"line {lineno}: unknown row {row}")
            elif section == "RHS":
                for row, value in zip(fields[1::2], fields[2::2]):
                    if row in row_index:
                        rhs[row_index[row]] = float(value)
            elif section == "RANGES":
                raise MpsFormatError(f"line {lineno}: ranged rows are not supported")
            elif section == "BOUNDS":
                code, col = fields[0].upper(), fields[2]
                value = float(fields[3]) if len(fields) > 3 else None
                bounds.append((code, col, value))
        except (IndexError, ValueError) as exc:
            if isinstance(exc, MpsFormatError):
                raise
            raise MpsFormatError(f"line {lineno}: {exc}") from exc

    n = len(col_names)
    lower = np.zeros(n)
    upper = np.full(n, np.inf)
    for code, col, value in bounds:
        if col not in col_index:
            raise MpsFormatError(f"bound on unknown column {col}")
        j = col_index[col]
        if code == "FR":
            lower[j], upper[j] = -np.inf, np.inf
        elif code == "MI":
            lower[j] = -np.inf
        elif code == "PL":
            upper[j] = np.inf
        elif code == "LO":
            lower[j] = value
        elif code == "UP":
            upper[j] = value
        elif code == "FX":
            lower[j] = upper[j] = value
        else:
            raise MpsFormatError(f"bound type {code} is not supported")

    rows, cols, vals = (zip(*triplets) if triplets else ((), (), ()))
    return SparseLp.from_triplets(
        n_cols=n,
        objective=[objective.get(j, 0.0) for j in range(n)],
        rows=list(rows),
        cols=list(cols),
        values=list(vals),
        senses=senses,
        rhs=[rhs.get(i, 0.0) for i in range(len(senses))],
        lower=lower,
        upper=upper,
        col_names=tuple(col_names),
        row_names=tuple(row_names),
        name=name,
    )
