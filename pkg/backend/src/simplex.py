"""Two-phase bounded revised simplex for desk-scale LPs.

Each row i gets a logical column r_i with a_i x + r_i = b_i, bounded to
[0, inf) for <= rows and [0, 0] for = rows. Column bounds are handled
directly: nonbasic columns sit at a finite bound, or at zero when free.

The basis is held as a sparse LU factorization (SuperLU) followed by a
product-form eta file, rebuilt every ``refactor_every`` pivots. A triangular
crash puts free columns into the basis for equality rows; rows whose logical
still ends up out of bounds get an artificial, and phase 1 minimizes their
sum. Pricing is Dantzig's rule with a switch to Bland's rule during runs of
degenerate pivots (or Bland throughout when configured). Everything is
deterministic given the input ordering.
"""
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import structlog

from .config import SolverTolerances, get_settings
from .lp import RowSense, SolveResult, SolveStatus, SparseLp, check_residuals

DEGENERATE_STEP = 1e-12
RATIO_TIE = 1e-12
CRASH_PIVOT = 0.1

BASIC, AT_LOWER, AT_UPPER, FREE, FIXED = range(5)


class _BasisFactor:
    """B^-1 as SuperLU factors of the last refactorized basis times an eta file."""

    def __init__(self, S: sp.csc_matrix, basis: np.ndarray, pivot_tol: float):
        self.m = basis.size
        self.etas: List[Tuple[int, np.ndarray]] = []
        self.lu = None
        if self.m == 0:
            return
        B = S[:, basis].tocsc()
        try:
            self.lu = spla.splu(B, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise np.linalg.LinAlgError(str(exc)) from exc
        diag = np.abs(self.lu.U.diagonal())
        if diag.min() < pivot_tol * max(1.0, diag.max()):
            raise np.linalg.LinAlgError(f"near-singular basis (pivot {diag.min():.3e})")

    def ftran(self, a: np.ndarray) -> np.ndarray:
        if self.m == 0:
            return np.zeros(0)
        v = self.lu.solve(np.asarray(a, dtype=float))
        for r, alpha in self.etas:
            vr = v[r] / alpha[r]
            v -= alpha * vr
            v[r] = vr
        return v

    def btran(self, c: np.ndarray) -> np.ndarray:
        if self.m == 0:
            return np.zeros(0)
        w = np.array(c, dtype=float)
        for r, alpha in reversed(self.etas):
            w[r] = (w[r] - (w @ alpha - w[r] * alpha[r])) / alpha[r]
        return self.lu.solve(w, trans="T")

    def update(self, r: int, alpha: np.ndarray) -> None:
        self.etas.append((r, alpha.copy()))


class _BoundedForm:
    """[A | I | artificials] with per-column bounds, plus a crashed starting basis."""

    def __init__(self, lp: SparseLp, pivot_tol: float):
        A = lp.matrix.tocsc()
        A.eliminate_zeros()
        m, n = lp.n_rows, lp.n_cols
        eq = np.array([s == RowSense.EQ for s in lp.senses], dtype=bool)
        self.m, self.n = m, n
        self.b = lp.rhs.astype(float).copy()

        lower = np.concatenate([lp.lower.astype(float), np.zeros(m)])
        upper = np.concatenate([lp.upper.astype(float), np.where(eq, 0.0, np.inf)])
        S = sp.hstack([A, sp.identity(m, format="csc")]).tocsc()

        x = np.zeros(n + m)
        finite_lo, finite_up = np.isfinite(lower), np.isfinite(upper)
        x[finite_lo] = lower[finite_lo]
        only_up = ~finite_lo & finite_up
        x[only_up] = upper[only_up]

        basis = np.arange(n, n + m, dtype=np.int64)
        for row, col in self._crash(A, eq, lower, upper):
            basis[row] = col
        basis_set = np.zeros(n + m, dtype=bool)
        basis_set[basis] = True
        nonbasic = np.where(basis_set, 0.0, x)
        factor = _BasisFactor(S, basis, pivot_tol)
        xB = factor.ftran(self.b - S @ nonbasic)

        # logicals still basic but out of bounds are swapped for artificials
        art_rows, art_signs = [], []
        for row in range(m):
            if basis[row] != n + row:
                continue
            value = xB[row]
            if value < 0.0 or (eq[row] and value != 0.0):
                art_rows.append(row)
                art_signs.append(1.0 if value >= 0.0 else -1.0)
        k = len(art_rows)
        if k:
            artificial = sp.csc_matrix((art_signs, (art_rows, list(range(k)))), shape=(m, k))
            S = sp.hstack([S, artificial]).tocsc()
        self.S = S
        self.lower = np.concatenate([lower, np.zeros(k)])
        self.upper = np.concatenate([upper, np.full(k, np.inf)])
        self.x = np.concatenate([x, np.zeros(k)])
        for j, row in enumerate(art_rows):
            basis[row] = n + m + j
        self.basis = basis
        self.first_artificial = n + m
        self.n_total = n + m + k

    @staticmethod
    def _crash(A: sp.csc_matrix, eq: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> List[Tuple[int, int]]:
        """Free columns assigned to equality rows so the basis stays triangular."""
        m, n = A.shape
        if not eq.any():
            return []
        free = np.flatnonzero(~np.isfinite(lower[:n]) & ~np.isfinite(upper[:n]))
        eq_counts = np.array([np.count_nonzero(eq[A.indices[A.indptr[j]:A.indptr[j + 1]]]) for j in free], dtype=np.int64)
        assigned = np.zeros(m, dtype=bool)
        pairs = []
        for j in free[np.argsort(eq_counts, kind="stable")]:
            rows = A.indices[A.indptr[j]:A.indptr[j + 1]]
            vals = np.abs(A.data[A.indptr[j]:A.indptr[j + 1]])
            if rows.size == 0 or assigned[rows].any():
                continue
            open_eq = eq[rows] & (vals >= CRASH_PIVOT * vals.max())
            if not open_eq.any():
                continue
            pick = np.flatnonzero(open_eq)
            row = int(rows[pick[np.argmax(vals[pick])]])
            assigned[row] = True
            pairs.append((row, int(j)))
        return pairs


class ReferenceSimplex:
    """Revised simplex with Bland's anti-cycling safeguard."""

    def __init__(self, tolerances: Optional[SolverTolerances] = None):
        self.tol = tolerances or get_settings().tolerances()
        self.logger = structlog.get_logger(__name__)

    def solve(self, lp: SparseLp) -> SolveResult:
        self.iterations = 0
        self.degenerate_run = 0
        try:
            form = _BoundedForm(lp, self.tol.pivot)
        except np.linalg.LinAlgError as exc:
            return self._result(SolveStatus.NUMERICAL_FAILURE, f"crash basis: {exc}")
        self.form = form
        self.basis = form.basis
        self.x = form.x
        self.state = self._initial_state()
        if not self._refactor():
            return self._result(SolveStatus.NUMERICAL_FAILURE, "singular starting basis")

        phase1_cost = np.zeros(form.n_total)
        phase1_cost[form.first_artificial:] = 1.0
        if form.n_total > form.first_artificial:
            status = self._iterate(phase1_cost)
            if status != SolveStatus.OPTIMAL:
                return self._result(status, "phase 1 did not converge")
            infeasibility = float(self.x[form.first_artificial:].sum())
            scale = 1.0 + (float(np.abs(form.b).max()) if form.m else 0.0)
            self.logger.debug("simplex_phase_done", phase=1, iterations=self.iterations, infeasibility=infeasibility)
            if infeasibility > self.tol.feasibility * scale:
                return self._result(SolveStatus.INFEASIBLE, f"phase 1 residual {infeasibility:.3e}")
            self._retire_artificials()

        cost = np.zeros(form.n_total)
        cost[: form.n] = lp.objective
        status = self._iterate(cost)
        self.logger.debug("simplex_phase_done", phase=2, iterations=self.iterations, status=status.value)
        if status != SolveStatus.OPTIMAL:
            return self._result(status, "phase 2 stopped")
        if not self._refactor():
            return self._result(SolveStatus.NUMERICAL_FAILURE, "singular final basis")

        x = np.clip(self.x[: form.n], lp.lower, lp.upper)
        residual = check_residuals(lp, x)
        if residual > self.tol.feasibility:
            return self._result(SolveStatus.NUMERICAL_FAILURE, f"final residual {residual:.3e} exceeds tolerance")
        value = float(lp.objective @ x)
        self.logger.info("simplex_solved", iterations=self.iterations, value=value, rows=form.m, cols=form.n_total)
        return SolveResult(status=SolveStatus.OPTIMAL, value=value, x=x, iterations=self.iterations, solver="reference")

    def _result(self, status: SolveStatus, message: str) -> SolveResult:
        self.logger.info("simplex_stopped", status=status.value, iterations=self.iterations, detail=message)
        return SolveResult(status=status, iterations=self.iterations, solver="reference", message=message)

    def _initial_state(self) -> np.ndarray:
        form = self.form
        lo_ok, up_ok = np.isfinite(form.lower), np.isfinite(form.upper)
        state = np.full(form.n_total, FREE, dtype=np.int8)
        state[up_ok] = AT_UPPER
        state[lo_ok] = AT_LOWER
        state[lo_ok & up_ok & (form.lower == form.upper)] = FIXED
        state[self.basis] = BASIC
        return state

    def _retire_artificials(self) -> None:
        form = self.form
        start = form.first_artificial
        form.upper[start:] = 0.0
        nonbasic = self.state[start:] != BASIC
        self.state[start:][nonbasic] = FIXED
        self.x[start:][nonbasic] = 0.0

    def _refactor(self) -> bool:
        form = self.form
        try:
            self.factor = _BasisFactor(form.S, self.basis, self.tol.pivot)
        except np.linalg.LinAlgError as exc:
            self.logger.warning("simplex_singular_basis", detail=str(exc))
            return False
        nonbasic = self.x.copy()
        nonbasic[self.basis] = 0.0
        self.x[self.basis] = self.factor.ftran(form.b - form.S @ nonbasic)
        xB = self.x[self.basis]
        drift = np.maximum(form.lower[self.basis] - xB, xB - form.upper[self.basis])
        scale = 1.0 + (float(np.abs(form.b).max()) if form.m else 0.0)
        if drift.size and drift.max() > self.tol.feasibility * scale:
            self.logger.warning("simplex_lost_feasibility", excess=float(drift.max()))
            return False
        return True

    def _column(self, j: int) -> np.ndarray:
        S = self.form.S
        a = np.zeros(self.form.m)
        start, stop = S.indptr[j], S.indptr[j + 1]
        a[S.indices[start:stop]] = S.data[start:stop]
        return self.factor.ftran(a)

    def _entering(self, reduced: np.ndarray, bland: bool) -> Tuple[int, float]:
        tol = self.tol.optimality
        state = self.state
        improving = (
            ((state == AT_LOWER) & (reduced < -tol))
            | ((state == AT_UPPER) & (reduced > tol))
            | ((state == FREE) & (np.abs(reduced) > tol))
        )
        candidates = np.flatnonzero(improving)
        if candidates.size == 0:
            return -1, 0.0
        q = int(candidates[0]) if bland else int(candidates[np.argmax(np.abs(reduced[candidates]))])
        return q, (1.0 if reduced[q] < 0.0 else -1.0)

    def _iterate(self, cost: np.ndarray) -> SolveStatus:
        form = self.form
        tol = self.tol
        since_refactor = len(self.factor.etas)
        while True:
            if self.iterations >= tol.max_iterations:
                return SolveStatus.ITERATION_LIMIT
            duals = self.factor.btran(cost[self.basis])
            reduced = cost - form.S.T @ duals
            bland = tol.pricing == "bland" or self.degenerate_run >= tol.degenerate_limit
            q, direction = self._entering(reduced, bland)
            if q < 0:
                return SolveStatus.OPTIMAL

            alpha = self._column(q)
            step, r = self._ratio_test(q, direction * alpha, bland)
            if r is None and not np.isfinite(step):
                return SolveStatus.UNBOUNDED

            self.x[self.basis] -= step * direction * alpha
            if r is None:
                self.x[q] = form.upper[q] if direction > 0 else form.lower[q]
                self.state[q] = AT_UPPER if direction > 0 else AT_LOWER
            else:
                leaving = int(self.basis[r])
                hits_lower = direction * alpha[r] > 0.0
                self.x[leaving] = form.lower[leaving] if hits_lower else form.upper[leaving]
                if form.lower[leaving] == form.upper[leaving]:
                    self.state[leaving] = FIXED
                else:
                    self.state[leaving] = AT_LOWER if hits_lower else AT_UPPER
                self.x[q] += step * direction
                self.basis[r] = q
                self.state[q] = BASIC
                self.factor.update(r, alpha)
                since_refactor += 1
            self.iterations += 1
            self.degenerate_run = self.degenerate_run + 1 if step <= DEGENERATE_STEP else 0

            if since_refactor >= tol.refactor_every:
                since_refactor = 0
                if not self._refactor():
                    return SolveStatus.NUMERICAL_FAILURE

    def _ratio_test(self, q: int, change: np.ndarray, bland: bool) -> Tuple[float, Optional[int]]:
        """Longest step along the entering direction; ``change`` is the decrease rate of x_B."""
        form = self.form
        basis = self.basis
        xB = self.x[basis]
        lo, up = form.lower[basis], form.upper[basis]
        piv = self.tol.pivot

        ratios = np.full(basis.size, np.inf)
        down = (change > piv) & np.isfinite(lo)
        ratios[down] = np.maximum(xB[down] - lo[down], 0.0) / change[down]
        rise = (change < -piv) & np.isfinite(up)
        ratios[rise] = np.maximum(up[rise] - xB[rise], 0.0) / -change[rise]

        flip = form.upper[q] - form.lower[q]
        best = float(ratios.min()) if ratios.size else np.inf
        if not np.isfinite(best) or flip <= best:
            return float(flip), None
        ties = np.flatnonzero(ratios <= best + RATIO_TIE)
        if bland:
            r = int(ties[np.argmin(basis[ties])])
        else:
            r = int(ties[np.argmax(np.abs(change[ties]))])
        return best, r


def solve_reference(lp: SparseLp, tolerances: Optional[SolverTolerances] = None) -> SolveResult:
    return ReferenceSimplex(tolerances).solve(lp)
