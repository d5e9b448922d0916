"""Hydro-thermal planning instances.

Each of the K regions has one aggregated reservoir. The stage-t decision is
[h; v; r; w] (hydro output, reservoir level, deficit, thermal output), plus
the lower-bound slack alpha when the relaxed model is requested. Inflows
follow a periodic autoregressive model whose noise takes finitely many values
per stage; stage 1 inflows are known, so d_1 = 1.

Rows per stage, K each, in this order: water balance, demand, level upper,
level lower, hydro upper, hydro lower, thermal upper, thermal lower, deficit
sign, and (relaxed model only) slack sign.
"""
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import structlog
from pydantic import BaseModel, ConfigDict, model_validator

from .exceptions import ShapeMismatchError, SpecValidationError
from .models import AdditiveRhs, ObjectiveSpec, ProblemSpec

logger = structlog.get_logger(__name__)

Vector = List[float]
Matrix = List[List[float]]

BLOCK_ROWS = 9
BLOCK_COLS = 4


class HydroParams(BaseModel):
    K: int
    N: int
    demand: List[Vector]
    thermal_cost: List[Vector]
    deficit_penalty: List[Vector]
    run_of_river: List[Vector]
    v_min: List[Vector]
    v_max: List[Vector]
    h_max: List[Vector]
    w_max: List[Vector]
    v0: Vector
    rho: float = 0.8
    slack_penalty: Optional[List[Vector]] = None

    @model_validator(mode="after")
    def _check(self) -> "HydroParams":
        per_stage = ["demand", "thermal_cost", "deficit_penalty", "run_of_river", "v_min", "v_max", "h_max", "w_max"]
        if self.slack_penalty is not None:
            per_stage.append("slack_penalty")
        for name in per_stage:
            values = getattr(self, name)
            if len(values) != self.N or any(len(v) != self.K for v in values):
                raise ValueError(f"{name} must hold {self.N} vectors of length {self.K}")
        if len(self.v0) != self.K:
            raise ValueError(f"v0 must have length {self.K}")
        g = np.array(self.run_of_river)
        if np.any(g < 0) or np.any(g > 1):
            raise ValueError("run-of-river fractions must lie in [0, 1]")
        if np.any(np.array(self.v_min) > np.array(self.v_max)):
            raise ValueError("reservoir lower bound above upper bound")
        for name in ("v_min", "v_max", "h_max", "w_max", "v0"):
            if np.any(np.array(getattr(self, name)) < 0):
                raise ValueError(f"{name} must be nonnegative")
        return self

    @property
    def relaxed(self) -> bool:
        return self.slack_penalty is not None

    def vec(self, name: str, t: int) -> np.ndarray:
        return np.asarray(getattr(self, name)[t - 1], dtype=float)


class ParStage(BaseModel):
    """Noise stage t >= 2: eta_t = sum_j B_t^j eta_{t-j} + C_t zeta_t."""

    lags: List[Matrix]
    scale: Matrix
    support: List[Vector]
    probabilities: Vector


class ParModel(BaseModel):
    """I_t = theta_t + eta_t; ``history`` lists eta_1, eta_0, eta_-1, ... (most recent first)."""

    theta: List[Vector]
    history: List[Vector]
    noise: List[ParStage]

    @model_validator(mode="after")
    def _check(self) -> "ParModel":
        if not self.theta:
            raise ValueError("at least one stage is required")
        if len(self.noise) != len(self.theta) - 1:
            raise ValueError("one noise stage is required for each of t = 2..N")
        if not self.history:
            raise ValueError("the history must contain at least eta_1")
        K = len(self.theta[0])
        if any(len(v) != K for v in self.theta + self.history):
            raise ValueError(f"theta and history vectors must have length {K}")
        for t, stage in enumerate(self.noise, start=2):
            shapes = [np.shape(b) for b in stage.lags] + [np.shape(stage.scale)]
            if any(shape != (K, K) for shape in shapes):
                raise ValueError(f"stage {t} lag and scale matrices must be {K}x{K}")
            if not stage.support or any(len(x) != K for x in stage.support):
                raise ValueError(f"stage {t} support points must have length {K}")
            p = np.asarray(stage.probabilities, dtype=float)
            if len(p) != len(stage.support) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError(f"stage {t} probabilities must be a distribution over the support")
        return self

    @property
    def N(self) -> int:
        return len(self.theta)

    @property
    def K(self) -> int:
        return len(self.theta[0])


class AffineInflows(BaseModel):
    """I_t = intercept_t + sum_{s=2..t} R^t_s zeta_s."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    intercepts: List[np.ndarray]
    loadings: Dict[Tuple[int, int], np.ndarray]

    def evaluate(self, t: int, noises: Sequence[np.ndarray]) -> np.ndarray:
        """Inflow at stage t given zeta_2..zeta_t."""
        total = self.intercepts[t - 1].copy()
        for s in range(2, t + 1):
            total = total + self.loadings[(t, s)] @ np.asarray(noises[s - 2], dtype=float)
        return total


def _history(model: ParModel, t: int) -> np.ndarray:
    """eta_t for t <= 1."""
    k = 1 - t
    if k >= len(model.history):
        raise SpecValidationError(f"PAR history does not reach back to stage {t}")
    return np.asarray(model.history[k], dtype=float)


def unroll_par(model: ParModel) -> AffineInflows:
    """Forward substitution of the PAR recursion into an affine map of the noises."""
    K, N = model.K, model.N
    deterministic = {1: _history(model, 1)}
    loadings: Dict[Tuple[int, int], np.ndarray] = {}
    for t in range(2, N + 1):
        stage = model.noise[t - 2]
        c = np.zeros(K)
        for j, B in enumerate(stage.lags, start=1):
            B = np.asarray(B, dtype=float)
            past = deterministic[t - j] if t - j >= 1 else _history(model, t - j)
            c = c + B @ past
            for s in range(2, t - j + 1):
                loadings[(t, s)] = loadings.get((t, s), np.zeros((K, K))) + B @ loadings[(t - j, s)]
        deterministic[t] = c
        for s in range(2, t):
            loadings.setdefault((t, s), np.zeros((K, K)))
        loadings[(t, t)] = np.asarray(stage.scale, dtype=float)
    intercepts = [np.asarray(model.theta[t - 1], dtype=float) + deterministic[t] for t in range(1, N + 1)]
    return AffineInflows(intercepts=intercepts, loadings=loadings)


def run_par_recursion(model: ParModel, noises: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Inflows I_1..I_N by running the recursion on zeta_2..zeta_N directly."""
    if len(noises) != model.N - 1:
        raise ShapeMismatchError(f"expected {model.N - 1} noise vectors, got {len(noises)}")
    eta = {1: _history(model, 1)}
    for t in range(2, model.N + 1):
        stage = model.noise[t - 2]
        value = np.asarray(stage.scale, dtype=float) @ np.asarray(noises[t - 2], dtype=float)
        for j, B in enumerate(stage.lags, start=1):
            past = eta[t - j] if t - j >= 1 else _history(model, t - j)
            value = value + np.asarray(B, dtype=float) @ past
        eta[t] = value
    return [np.asarray(model.theta[t - 1], dtype=float) + eta[t] for t in range(1, model.N + 1)]


def _inflow_rows(params: HydroParams, t: int, inflow: np.ndarray, m: int) -> np.ndarray:
    g = params.vec("run_of_river", t)
    K = params.K
    rows = np.zeros(m)
    rows[:K] = g * inflow
    rows[K:2 * K] = (1.0 - g) * inflow
    return rows


def _constant_rows(params: HydroParams, t: int, m: int) -> np.ndarray:
    K = params.K
    rows = np.zeros(m)
    if t == 1:
        rows[:K] = params.v0
    rows[K:2 * K] = -params.vec("demand", t)
    rows[2 * K:3 * K] = params.vec("v_max", t)
    lower = params.vec("v_min", t)
    if t == params.N:
        lower = np.maximum(lower, params.rho * np.asarray(params.v0, dtype=float))
    rows[3 * K:4 * K] = -lower
    rows[4 * K:5 * K] = params.vec("h_max", t)
    rows[6 * K:7 * K] = params.vec("w_max", t)
    return rows


def stage_rhs(params: HydroParams, t: int, inflow: np.ndarray) -> np.ndarray:
    """Right-hand side of stage t for a given inflow vector I_t."""
    m = row_count(params)
    return _constant_rows(params, t, m) + _inflow_rows(params, t, np.asarray(inflow, dtype=float), m)


def row_count(params: HydroParams) -> int:
    return (BLOCK_ROWS + int(params.relaxed)) * params.K


def column_count(params: HydroParams) -> int:
    return (BLOCK_COLS + int(params.relaxed)) * params.K


def _stage_blocks(params: HydroParams) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
    """A^{tt} and A^{t,t-1}; identical for every stage."""
    K = params.K
    I = sp.identity(K, format="csr")
    zero = sp.csr_matrix((K, K))
    h, v, r, w = range(4)
    layout = [
        {h: I, v: I},
        {h: -I, w: -I, r: -I},
        {v: I},
        {v: -I},
        {h: I},
        {h: -I},
        {w: I},
        {w: -I},
        {r: -I},
    ]
    n_blocks = BLOCK_COLS
    if params.relaxed:
        alpha = 4
        n_blocks += 1
        layout[3] = {v: -I, alpha: -I}
        layout.append({alpha: -I})
    current = sp.bmat([[row.get(j, zero) for j in range(n_blocks)] for row in layout], format="csr")
    previous_rows = [[zero] * n_blocks for _ in layout]
    previous_rows[0][v] = -I
    previous = sp.bmat(previous_rows, format="csr")
    return current, previous


def stage_cost(params: HydroParams, t: int) -> np.ndarray:
    K = params.K
    cost = np.zeros(column_count(params))
    cost[2 * K:3 * K] = params.vec("deficit_penalty", t)
    cost[3 * K:4 * K] = params.vec("thermal_cost", t)
    if params.relaxed:
        cost[4 * K:5 * K] = params.vec("slack_penalty", t)
    return cost


def generate(params: HydroParams, model: ParModel) -> ProblemSpec:
    """The hydro-thermal problem with memory 1, additive in the noise indices."""
    if model.N != params.N or model.K != params.K:
        raise ShapeMismatchError(
            f"PAR model has N={model.N}, K={model.K}; parameters have N={params.N}, K={params.K}"
        )
    N = params.N
    m = row_count(params)
    n = column_count(params)
    affine = unroll_par(model)
    d = (1,) + tuple(len(stage.support) for stage in model.noise)

    current, previous = _stage_blocks(params)
    A = {}
    for t in range(1, N + 1):
        A[(t, t)] = current
        if t > 1:
            A[(t, t - 1)] = previous

    beta = {}
    for t in range(1, N + 1):
        beta[(t, 1)] = (
            _constant_rows(params, t, m) + _inflow_rows(params, t, affine.intercepts[t - 1], m)
        ).reshape(1, m)
        for s in range(2, t + 1):
            R = affine.loadings[(t, s)]
            support = model.noise[s - 2].support
            beta[(t, s)] = np.vstack([
                _inflow_rows(params, t, R @ np.asarray(chi, dtype=float), m) for chi in support
            ])
    rhs = AdditiveRhs(d=d, mu=1, widths=(m,) * N, coefficients=beta)

    marginals = [np.ones(1)] + [np.asarray(stage.probabilities, dtype=float) for stage in model.noise]
    objective = ObjectiveSpec.expected([stage_cost(params, t) for t in range(1, N + 1)], marginals)
    spec = ProblemSpec(N=N, n=(n,) * N, m=(m,) * N, d=d, A=A, rhs=rhs, mu=1, objective=objective)
    logger.info("hydro_generated", K=params.K, N=N, rows_per_stage=m, cols_per_stage=n, d=list(d))
    return spec


def default_instance(
    K: int = 2, N: int = 6, d: int = 3, seed: int = 0, relaxation: bool = False
) -> Tuple[HydroParams, ParModel]:
    """A feasible sanity instance with nonnegative inflows and an initial level
    inside the bounds and above rho * v0.

    The hydro cap sits below the net demand of every stage, so thermal output
    or deficit is always dispatched and the optimal cost is strictly positive.
    For N <= 6 levels stay below v_max even when nothing is turbined.
    """
    rng = np.random.default_rng(seed)

    def stages(low: float, high: float) -> List[Vector]:
        return rng.uniform(low, high, size=(N, K)).round(3).tolist()

    demand = stages(5.0, 10.0)
    params = HydroParams(
        K=K,
        N=N,
        demand=demand,
        thermal_cost=stages(1.0, 3.0),
        deficit_penalty=stages(10.0, 20.0),
        run_of_river=stages(0.6, 0.9),
        v_min=[[20.0] * K for _ in range(N)],
        v_max=[[100.0] * K for _ in range(N)],
        h_max=[[3.0] * K for _ in range(N)],
        w_max=[[float(x) + 5.0 for x in row] for row in demand],
        v0=[50.0] * K,
        rho=0.8,
        slack_penalty=stages(50.0, 80.0) if relaxation else None,
    )
    support = np.linspace(-1.0, 1.0, d) if d > 1 else np.zeros(1)
    noise = [
        ParStage(
            lags=[(0.3 * np.eye(K)).tolist()],
            scale=(0.5 * np.eye(K)).tolist(),
            support=[[float(z)] * K for z in support],
            probabilities=[1.0 / d] * d,
        )
        for _ in range(2, N + 1)
    ]
    model = ParModel(theta=stages(1.0, 3.0), history=[[0.0] * K], noise=noise)
    return params, model


class HydroConfig(BaseModel):
    """Hydro parameter document: explicit data, or a request for the default instance."""

    params: Optional[HydroParams] = None
    par: Optional[ParModel] = None
    default: Optional[Dict[str, float]] = None

    @model_validator(mode="after")
    def _check(self) -> "HydroConfig":
        explicit = self.params is not None and self.par is not None
        if explicit == (self.default is not None):
            raise ValueError("give either params and par, or default")
        return self

    def resolve(self) -> Tuple[HydroParams, ParModel]:
        if self.default is not None:
            options = dict(self.default)
            return default_instance(
                K=int(options.get("K", 2)),
                N=int(options.get("N", 6)),
                d=int(options.get("d", 3)),
                seed=int(options.get("seed", 0)),
                relaxation=bool(options.get("relaxation", False)),
            )
        return self.params, self.par
