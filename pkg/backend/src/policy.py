"""Policy evaluation: exhaustive and sampled scenario sets, Monte Carlo
simulation with cost and violation statistics, and the closed-form expected
cost of a rule.
"""
import itertools
import json
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel, ConfigDict

from .config import get_settings
from .exceptions import ObjectiveError, ShapeMismatchError, SizeGuardError
from .models import ObjectiveKind, ProblemSpec, RuleCoefficients

MASK64 = (1 << 64) - 1


class SplitMix64:
    """64-bit SplitMix generator.

    ``next_float`` takes the top 53 bits; ``choice`` inverts the CDF of a
    probability vector with one draw.
    """

    GOLDEN = 0x9E3779B97F4A7C15

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + self.GOLDEN) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def choice(self, probabilities: Sequence[float]) -> int:
        """0-based index drawn from ``probabilities``."""
        u = self.next_float()
        cdf = np.cumsum(probabilities)
        return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


class ScenarioSet(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    trajectories: List[Tuple[int, ...]]
    weights: np.ndarray

    @property
    def count(self) -> int:
        return len(self.trajectories)


def exhaustive_scenarios(spec: ProblemSpec, marginals: Optional[Sequence[np.ndarray]] = None) -> ScenarioSet:
    """Every trajectory of D^N, weighted by its probability (uniform without marginals)."""
    total = math.prod(spec.d)
    limit = get_settings().max_trajectories
    if total > limit:
        raise SizeGuardError(f"{total} trajectories exceed the limit of {limit}")
    marginals = marginals if marginals is not None else spec.objective.marginals
    trajectories = list(itertools.product(*(range(1, k + 1) for k in spec.d)))
    if marginals is None:
        weights = np.full(total, 1.0 / total)
    else:
        weights = np.array([
            math.prod(float(marginals[s][v - 1]) for s, v in enumerate(traj)) for traj in trajectories
        ])
    return ScenarioSet(trajectories=trajectories, weights=weights)


def sample_scenarios(
    spec: ProblemSpec,
    count: int,
    seed: int = 0,
    marginals: Optional[Sequence[np.ndarray]] = None,
) -> ScenarioSet:
    marginals = marginals if marginals is not None else spec.objective.marginals
    if marginals is None:
        raise ObjectiveError("sampling needs per-stage marginal probabilities")
    rng = SplitMix64(seed)
    trajectories = [
        tuple(rng.choice(marginals[s]) + 1 for s in range(spec.N)) for _ in range(count)
    ]
    return ScenarioSet(trajectories=trajectories, weights=np.full(count, 1.0 / count) if count else np.zeros(0))


class SimulationReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    costs: List[float]
    weights: List[float]
    mean_cost: float
    weighted_cost: float
    std_cost: float
    row_labels: List[str]
    mean_violation: List[float]
    max_violation: float
    feasibility_rate: float
    traces: Optional[List[List[List[float]]]] = None

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, indent=2)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"constraint": self.row_labels, "mean_rel_violation": self.mean_violation})

    def to_table(self) -> str:
        summary = pd.DataFrame(
            {
                "scenarios": [len(self.costs)],
                "mean_cost": [self.mean_cost],
                "weighted_cost": [self.weighted_cost],
                "std_cost": [self.std_cost],
                "max_rel_violation": [self.max_violation],
                "feasible_share": [self.feasibility_rate],
            }
        )
        lines = [summary.to_string(index=False, float_format=lambda v: f"{v:14.6f}")]
        violated = self.to_frame()
        violated = violated[violated["mean_rel_violation"] > 0]
        if len(violated):
            lines.append(violated.to_string(index=False, float_format=lambda v: f"{v:12.3e}"))
        return "\n\n".join(lines) + "\n"


class PolicySimulator:
    """Evaluates one rule on scenario sets of a problem."""

    def __init__(self, spec: ProblemSpec, rule: RuleCoefficients):
        if rule.d != spec.d or rule.widths != spec.n:
            raise ShapeMismatchError("rule coefficients do not match the problem dimensions")
        self.spec = spec
        self.rule = rule
        self.settings = get_settings()
        self.logger = structlog.get_logger(__name__)

    def decisions(self, trajectory: Sequence[int]) -> List[np.ndarray]:
        return [self.rule.evaluate(trajectory[:t]) for t in range(1, self.spec.N + 1)]

    def cost(self, decisions: Sequence[np.ndarray]) -> float:
        obj = self.spec.objective
        if obj.kind == ObjectiveKind.WORST_CASE:
            return max(
                math.fsum(float(h[t] @ decisions[t]) for t in range(self.spec.N)) for h in obj.functionals
            )
        return math.fsum(float(obj.costs[t] @ decisions[t]) for t in range(self.spec.N))

    def violations(self, trajectory: Sequence[int], decisions: Sequence[np.ndarray]) -> np.ndarray:
        """Relative violation of every row, stages concatenated."""
        parts = []
        for t in range(1, self.spec.N + 1):
            lhs = self.spec.lhs(t, decisions)
            rhs = self.spec.rhs.evaluate(trajectory[:t])
            excess = lhs - rhs
            excess = np.where(excess > self.settings.violation_tol, excess, 0.0)
            scale = np.where(rhs != 0.0, np.abs(rhs), 1.0)
            parts.append(excess / scale)
        return np.concatenate(parts)

    def simulate(self, scenarios: ScenarioSet, keep_traces: bool = False) -> SimulationReport:
        spec = self.spec
        costs: List[float] = []
        violations = []
        traces = [] if keep_traces else None
        for trajectory in scenarios.trajectories:
            if len(trajectory) != spec.N:
                raise ShapeMismatchError(f"scenario {trajectory} does not cover {spec.N} stages")
            decisions = self.decisions(trajectory)
            costs.append(self.cost(decisions))
            violations.append(self.violations(trajectory, decisions))
            if keep_traces:
                traces.append([x.tolist() for x in decisions])

        count = len(costs)
        table = np.vstack(violations) if violations else np.zeros((0, sum(spec.m)))
        mean = math.fsum(costs) / count if count else 0.0
        std = math.sqrt(math.fsum((c - mean) ** 2 for c in costs) / count) if count else 0.0
        weights = [float(w) for w in scenarios.weights]
        report = SimulationReport(
            costs=costs,
            weights=weights,
            mean_cost=mean,
            weighted_cost=math.fsum(w * c for w, c in zip(weights, costs)),
            std_cost=std,
            row_labels=[f"t{t}_r{i}" for t in range(1, spec.N + 1) for i in range(1, spec.m[t - 1] + 1)],
            mean_violation=[
                math.fsum(table[:, j]) / count if count else 0.0 for j in range(table.shape[1])
            ],
            max_violation=float(table.max()) if table.size else 0.0,
            feasibility_rate=float(np.mean(np.all(table == 0.0, axis=1))) if count else 1.0,
            traces=traces,
        )
        self.logger.info(
            "simulation_done",
            scenarios=count,
            mean_cost=report.mean_cost,
            max_violation=report.max_violation,
            feasibility_rate=report.feasibility_rate,
        )
        return report


def simulate(
    spec: ProblemSpec,
    rule: RuleCoefficients,
    scenarios: Optional[ScenarioSet] = None,
    count: Optional[int] = None,
    seed: Optional[int] = None,
    keep_traces: bool = False,
) -> SimulationReport:
    """Simulate on explicit scenarios, or on ``count`` sampled ones from ``seed``."""
    if scenarios is None:
        if count is None:
            raise ObjectiveError("give a scenario set or a sample count")
        seed = get_settings().default_seed if seed is None else seed
        scenarios = sample_scenarios(spec, count, seed)
    return PolicySimulator(spec, rule).simulate(scenarios, keep_traces)


def expected_cost(spec: ProblemSpec, rule: RuleCoefficients) -> float:
    """sum_t f_t' sum_s sum_xi P(xi) u^t_{s xi}, with product fragment probabilities."""
    obj = spec.objective
    if obj.kind != ObjectiveKind.EXPECTED:
        raise ObjectiveError(f"closed-form expected cost needs an expected objective, not {obj.kind.value}")
    terms = []
    for t in range(1, spec.N + 1):
        for s in range(1, t + 1):
            probs = rule.space(s).probabilities(obj.marginals)
            terms.extend((probs * (rule.block(t, s) @ obj.costs[t - 1])).tolist())
    return math.fsum(terms)
