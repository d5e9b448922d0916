"""Solver registry: the embedded reference simplex, HiGHS through SciPy, and
external plugins that read an MPS file and write a solution file.

Plugin solution files hold the status token on line 1, the objective value on
line 2, then one ``name value`` pair per line.
"""
import subprocess
import tempfile
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np
import structlog
from scipy.optimize import linprog

from .config import SolverTolerances, get_settings
from .exceptions import SolverError
from .lp import RowSense, SolveResult, SolveStatus, SparseLp, check_residuals, write_mps
from .simplex import solve_reference

Solver = Callable[[SparseLp], SolveResult]

logger = structlog.get_logger(__name__)

_HIGHS_STATUS = {
    0: SolveStatus.OPTIMAL,
    1: SolveStatus.ITERATION_LIMIT,
    2: SolveStatus.INFEASIBLE,
    3: SolveStatus.UNBOUNDED,
    4: SolveStatus.NUMERICAL_FAILURE,
}

_PLUGIN_STATUS = {
    "optimal": SolveStatus.OPTIMAL,
    "infeasible": SolveStatus.INFEASIBLE,
    "unbounded": SolveStatus.UNBOUNDED,
}


def solve_highs(lp: SparseLp, tolerances: Optional[SolverTolerances] = None) -> SolveResult:
    tol = tolerances or get_settings().tolerances()
    eq = np.array([s == RowSense.EQ for s in lp.senses], dtype=bool)
    A = lp.matrix.tocsr()
    kwargs = {}
    if (~eq).any():
        kwargs.update(A_ub=A[~eq], b_ub=lp.rhs[~eq])
    if eq.any():
        kwargs.update(A_eq=A[eq], b_eq=lp.rhs[eq])
    bounds = np.column_stack([lp.lower, lp.upper]) if lp.n_cols else None
    res = linprog(
        lp.objective,
        bounds=bounds,
        method="highs",
        options={"primal_feasibility_tolerance": tol.feasibility * 1e-1, "dual_feasibility_tolerance": tol.optimality},
        **kwargs,
    )
    status = _HIGHS_STATUS.get(res.status, SolveStatus.SOLVER_ERROR)
    if status != SolveStatus.OPTIMAL:
        return SolveResult(status=status, iterations=int(getattr(res, "nit", 0)), solver="highs", message=res.message)
    x = np.asarray(res.x, dtype=float)
    return _certified(lp, x, int(res.nit), "highs", tol)


def _certified(lp: SparseLp, x: np.ndarray, iterations: int, solver: str, tol: SolverTolerances) -> SolveResult:
    residual = check_residuals(lp, x)
    if residual > tol.feasibility:
        return SolveResult(
            status=SolveStatus.NUMERICAL_FAILURE,
            iterations=iterations,
            solver=solver,
            message=f"solution violates constraints by {residual:.3e}",
        )
    return SolveResult(
        status=SolveStatus.OPTIMAL, value=float(lp.objective @ x), x=x, iterations=iterations, solver=solver
    )


def solve_via_plugin(lp: SparseLp, plugin: str, tolerances: Optional[SolverTolerances] = None) -> SolveResult:
    settings = get_settings()
    tol = tolerances or settings.tolerances()
    executable = settings.plugin_solvers.get(plugin)
    if executable is None:
        raise SolverError(f"plugin solver '{plugin}' is not registered (set CDDR_PLUGIN_SOLVERS)")
    names = [lp.column_name(j) for j in range(lp.n_cols)]
    solver = f"plugin:{plugin}"

    with tempfile.TemporaryDirectory(prefix="cddr-") as workdir:
        mps_path = Path(workdir) / "problem.mps"
        sol_path = Path(workdir) / "solution.txt"
        mps_path.write_text(write_mps(lp, names))
        try:
            proc = subprocess.run(
                [executable, str(mps_path), str(sol_path)],
                capture_output=True,
                text=True,
                timeout=settings.plugin_timeout,
            )
        except subprocess.TimeoutExpired as exc:
            logger.warning("plugin_failed", plugin=plugin, reason="timeout")
            return SolveResult(status=SolveStatus.SOLVER_ERROR, solver=solver, message=f"timed out: {exc}")
        except OSError as exc:
            logger.warning("plugin_failed", plugin=plugin, reason=str(exc))
            return SolveResult(status=SolveStatus.SOLVER_ERROR, solver=solver, message=str(exc))
        if proc.returncode != 0 or not sol_path.exists():
            logger.warning("plugin_failed", plugin=plugin, returncode=proc.returncode)
            return SolveResult(
                status=SolveStatus.SOLVER_ERROR,
                solver=solver,
                message=f"exit code {proc.returncode}; stderr: {proc.stderr.strip()[-2000:]}",
            )
        lines = sol_path.read_text().splitlines()

    try:
        status = _PLUGIN_STATUS.get(lines[0].strip().lower(), SolveStatus.SOLVER_ERROR)
        if status != SolveStatus.OPTIMAL:
            return SolveResult(status=status, solver=solver, message=lines[0].strip())
        reported = float(lines[1])
        index = {name: j for j, name in enumerate(names)}
        x = np.zeros(lp.n_cols)
        for line in lines[2:]:
            if not line.strip():
                continue
            name, value = line.split()
            if name in index:
                x[index[name]] = float(value)
    except (IndexError, ValueError) as exc:
        return SolveResult(status=SolveStatus.SOLVER_ERROR, solver=solver, message=f"bad solution file: {exc}")

    result = _certified(lp, x, 0, solver, tol)
    if result.optimal and abs(result.value - reported) > 1e-9 * max(1.0, abs(reported)):
        logger.warning("plugin_value_mismatch", reported=reported, recomputed=result.value)
    return result


def get_solver(identifier: str = "reference", tolerances: Optional[SolverTolerances] = None) -> Solver:
    builtin: Dict[str, Solver] = {
        "reference": lambda lp: solve_reference(lp, tolerances),
        "highs": lambda lp: solve_highs(lp, tolerances),
    }
    if identifier in builtin:
        return builtin[identifier]
    if identifier.startswith("plugin:"):
        name = identifier.split(":", 1)[1]
        return lambda lp: solve_via_plugin(lp, name, tolerances)
    raise SolverError(f"unknown solver '{identifier}' (reference | highs | plugin:NAME)")
