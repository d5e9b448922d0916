"""Problem description, fragment algebra and additive coefficient tables.

Conventions shared by every other module:

* stages are 1-based; stages ``s <= 0`` are padding stages with a single
  realization (value 1) and are never stored;
* a fragment ``xi_{tau-mu+1:tau}`` is a tuple of ``mu`` 1-based values and is
  flattened 0-based, mixed-radix, with the most recent stage varying fastest;
* coefficient tables are keyed by ``(t, s)`` with ``1 <= s <= t <= N`` and hold
  an array of shape ``(space(s).size, width_t)``.
"""
import itertools
import math
from enum import Enum
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .exceptions import (
    IndexOutOfRangeError,
    InvalidWideningError,
    ShapeMismatchError,
)

PROBABILITY_TOL = 1e-12


def _frozen(values: Any) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.flags.writeable = False
    return arr


class FragmentSpace(BaseModel):
    """The index set D_{tau-mu+1:tau}; padding stages have radix 1."""

    model_config = ConfigDict(frozen=True)

    tau: int
    mu: int
    radices: Tuple[int, ...]

    @classmethod
    def build(cls, tau: int, mu: int, d: Sequence[int]) -> "FragmentSpace":
        radices = tuple(int(d[s - 1]) if s >= 1 else 1 for s in range(tau - mu + 1, tau + 1))
        return cls(tau=tau, mu=mu, radices=radices)

    @model_validator(mode="after")
    def _check(self) -> "FragmentSpace":
        if self.mu < 0:
            raise ValueError("fragment depth must be nonnegative")
        if len(self.radices) != self.mu:
            raise ValueError(f"expected {self.mu} radices, got {len(self.radices)}")
        if any(r < 1 for r in self.radices):
            raise ValueError("radices must be positive")
        return self

    @property
    def stages(self) -> range:
        return range(self.tau - self.mu + 1, self.tau + 1)

    @property
    def size(self) -> int:
        return math.prod(self.radices)

    def index(self, fragment: Sequence[int]) -> int:
        if len(fragment) != self.mu:
            raise ShapeMismatchError(
                f"fragment of length {len(fragment)} for a depth-{self.mu} space"
            )
        for value, radix, stage in zip(fragment, self.radices, self.stages):
            if not 1 <= value <= radix:
                raise IndexOutOfRangeError(
                    f"value {value} at stage {stage} outside 1..{radix}"
                )
        if not self.radices:
            return 0
        return int(np.ravel_multi_index(tuple(int(v) - 1 for v in fragment), self.radices))

    def unindex(self, flat: int) -> Tuple[int, ...]:
        if not 0 <= flat < self.size:
            raise IndexOutOfRangeError(f"flat index {flat} outside 0..{self.size - 1}")
        if not self.radices:
            return ()
        return tuple(int(i) + 1 for i in np.unravel_index(flat, self.radices))

    def fragments(self) -> Iterator[Tuple[int, ...]]:
        return itertools.product(*(range(1, r + 1) for r in self.radices))

    def digits(self) -> np.ndarray:
        """0-based digit table of shape (size, mu) in flat order."""
        if not self.radices:
            return np.zeros((1, 0), dtype=np.int64)
        return np.stack(np.unravel_index(np.arange(self.size), self.radices), axis=1)

    def ravel(self, digits: np.ndarray) -> np.ndarray:
        """Flat indices of a (k, mu) table of 0-based digits."""
        if not self.radices:
            return np.zeros(digits.shape[0], dtype=np.int64)
        return np.ravel_multi_index(tuple(digits.T), self.radices)

    def probabilities(self, marginals: Sequence[np.ndarray]) -> np.ndarray:
        """Product probability of every fragment; padding stages contribute 1."""
        digits = self.digits()
        probs = np.ones(self.size)
        for k, stage in enumerate(self.stages):
            if stage >= 1:
                probs = probs * np.asarray(marginals[stage - 1])[digits[:, k]]
        return probs


def fragment_of(trajectory: Sequence[int], tau: int, mu: int) -> Tuple[int, ...]:
    return tuple(int(trajectory[s - 1]) if s >= 1 else 1 for s in range(tau - mu + 1, tau + 1))


def fragment_index(space: FragmentSpace, fragment: Sequence[int]) -> int:
    return space.index(fragment)


def fragment_unindex(space: FragmentSpace, flat: int) -> Tuple[int, ...]:
    return space.unindex(flat)


class AdditiveTable(BaseModel):
    """Coefficients of a function additive with memory ``mu``."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    d: Tuple[int, ...]
    mu: int
    widths: Tuple[int, ...]
    coefficients: Dict[Tuple[int, int], np.ndarray]

    @field_validator("coefficients", mode="before")
    @classmethod
    def _freeze(cls, value: Dict[Tuple[int, int], Any]) -> Dict[Tuple[int, int], np.ndarray]:
        return {(int(t), int(s)): _frozen(block) for (t, s), block in value.items()}

    @model_validator(mode="after")
    def _check(self) -> "AdditiveTable":
        if self.mu < 1:
            raise ValueError("memory depth must be at least 1")
        if len(self.widths) != len(self.d):
            raise ValueError("widths and cardinalities disagree on the stage count")
        for t in range(1, self.N + 1):
            for s in range(1, t + 1):
                block = self.coefficients.get((t, s))
                expected = (self.space(s).size, self.widths[t - 1])
                if block is None:
                    raise ValueError(f"missing coefficient block ({t}, {s})")
                if block.shape != expected:
                    raise ValueError(f"block ({t}, {s}) has shape {block.shape}, expected {expected}")
                if not np.all(np.isfinite(block)):
                    raise ValueError(f"block ({t}, {s}) has non-finite entries")
        extra = [key for key in self.coefficients if not 1 <= key[1] <= key[0] <= self.N]
        if extra:
            raise ValueError(f"unexpected coefficient blocks {sorted(extra)}")
        return self

    @classmethod
    def from_blocks(
        cls,
        d: Sequence[int],
        mu: int,
        widths: Sequence[int],
        blocks: Optional[Dict[Tuple[int, int], Any]] = None,
    ):
        """Build a table; blocks not supplied are zero."""
        blocks = dict(blocks or {})
        full = {}
        for t in range(1, len(d) + 1):
            for s in range(1, t + 1):
                size = FragmentSpace.build(s, mu, d).size
                full[(t, s)] = blocks.pop((t, s), np.zeros((size, widths[t - 1])))
        if blocks:
            raise ShapeMismatchError(f"blocks outside 1 <= s <= t <= N: {sorted(blocks)}")
        return cls(d=tuple(d), mu=mu, widths=tuple(widths), coefficients=full)

    @property
    def N(self) -> int:
        return len(self.d)

    def space(self, s: int) -> FragmentSpace:
        return FragmentSpace.build(s, self.mu, self.d)

    def block(self, t: int, s: int) -> np.ndarray:
        return self.coefficients[(t, s)]

    def check_trajectory(self, trajectory: Sequence[int]) -> None:
        if len(trajectory) > self.N:
            raise IndexOutOfRangeError(
                f"trajectory of length {len(trajectory)} exceeds {self.N} stages"
            )
        if len(trajectory) == 0:
            raise IndexOutOfRangeError("empty trajectory")
        for s, value in enumerate(trajectory, start=1):
            if not 1 <= value <= self.d[s - 1]:
                raise IndexOutOfRangeError(f"value {value} at stage {s} outside 1..{self.d[s - 1]}")

    def evaluate(self, trajectory: Sequence[int]) -> np.ndarray:
        """Sum the coefficients along ``trajectory`` in increasing stage order."""
        self.check_trajectory(trajectory)
        t = len(trajectory)
        total = np.zeros(self.widths[t - 1])
        for s in range(1, t + 1):
            flat = self.space(s).index(fragment_of(trajectory, s, self.mu))
            total = total + self.coefficients[(t, s)][flat]
        return total

    def widen(self, mu: int):
        """Re-express the table at depth ``mu``; values depend only on the trailing coordinates."""
        if mu < self.mu:
            raise InvalidWideningError(f"cannot widen depth {self.mu} to {mu}")
        if mu == self.mu:
            return self
        blocks = {}
        for s in range(1, self.N + 1):
            wide = FragmentSpace.build(s, mu, self.d)
            narrow = self.space(s)
            source = narrow.ravel(wide.digits()[:, mu - self.mu:])
            for t in range(s, self.N + 1):
                blocks[(t, s)] = self.coefficients[(t, s)][source]
        return type(self)(d=self.d, mu=mu, widths=self.widths, coefficients=blocks)


class AdditiveRhs(AdditiveTable):
    """Right-hand sides b_t as coefficient tables beta^t_{s xi} of width m_t."""

    @property
    def beta(self) -> Dict[Tuple[int, int], np.ndarray]:
        return self.coefficients


class RuleCoefficients(AdditiveTable):
    """Decision rule coefficients u^t_{tau xi} of width n_t."""

    @property
    def u(self) -> Dict[Tuple[int, int], np.ndarray]:
        return self.coefficients


def widen_memory(rhs: AdditiveRhs, target: int) -> AdditiveRhs:
    return rhs.widen(target)


def widen_rule(rule: RuleCoefficients, target: int) -> RuleCoefficients:
    return rule.widen(target)


def eval_rhs(rhs: AdditiveRhs, trajectory: Sequence[int]) -> np.ndarray:
    return rhs.evaluate(trajectory)


def eval_policy(rule: RuleCoefficients, trajectory: Sequence[int]) -> np.ndarray:
    return rule.evaluate(trajectory)


class ObjectiveKind(str, Enum):
    EXPECTED = "expected"
    SAA = "saa"
    WORST_CASE = "worst_case"


class ObjectiveSpec(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kind: ObjectiveKind
    costs: Optional[List[np.ndarray]] = None
    marginals: Optional[List[np.ndarray]] = None
    scenarios: Optional[List[Tuple[int, ...]]] = None
    weights: Optional[np.ndarray] = None
    functionals: Optional[List[List[np.ndarray]]] = None

    @field_validator("costs", "marginals", mode="before")
    @classmethod
    def _freeze_vectors(cls, value):
        return None if value is None else [_frozen(v) for v in value]

    @field_validator("weights", mode="before")
    @classmethod
    def _freeze_weights(cls, value):
        return None if value is None else _frozen(value)

    @field_validator("functionals", mode="before")
    @classmethod
    def _freeze_functionals(cls, value):
        return None if value is None else [[_frozen(h) for h in row] for row in value]

    @model_validator(mode="after")
    def _check(self) -> "ObjectiveSpec":
        if self.kind == ObjectiveKind.EXPECTED:
            if self.costs is None or self.marginals is None:
                raise ValueError("expected objective needs costs and marginals")
            for t, p in enumerate(self.marginals, start=1):
                if np.any(p < 0) or abs(float(p.sum()) - 1.0) > PROBABILITY_TOL:
                    raise ValueError(f"marginal of stage {t} is not a probability vector")
        elif self.kind == ObjectiveKind.SAA:
            if self.costs is None or self.scenarios is None or self.weights is None:
                raise ValueError("sample-average objective needs costs, scenarios and weights")
            if len(self.weights) != len(self.scenarios):
                raise ValueError("one weight per scenario is required")
            if np.any(self.weights < 0):
                raise ValueError("scenario weights must be nonnegative")
        elif self.kind == ObjectiveKind.WORST_CASE:
            if not self.functionals:
                raise ValueError("worst-case objective needs at least one functional")
        return self

    @classmethod
    def expected(cls, costs: Sequence[Any], marginals: Sequence[Any]) -> "ObjectiveSpec":
        return cls(kind=ObjectiveKind.EXPECTED, costs=list(costs), marginals=list(marginals))

    @classmethod
    def saa(
        cls,
        costs: Sequence[Any],
        scenarios: Sequence[Sequence[int]],
        weights: Optional[Sequence[float]] = None,
    ) -> "ObjectiveSpec":
        scenarios = [tuple(int(v) for v in sc) for sc in scenarios]
        if weights is None:
            weights = np.full(len(scenarios), 1.0 / len(scenarios)) if scenarios else np.zeros(0)
        return cls(kind=ObjectiveKind.SAA, costs=list(costs), scenarios=scenarios, weights=weights)

    @classmethod
    def worst_case(cls, functionals: Sequence[Sequence[Any]]) -> "ObjectiveSpec":
        return cls(kind=ObjectiveKind.WORST_CASE, functionals=[list(h) for h in functionals])

    @classmethod
    def feasibility(cls, n: Sequence[int]) -> "ObjectiveSpec":
        """Zero objective: a sample average over no scenarios."""
        return cls.saa([np.zeros(k) for k in n], [], [])


def _as_csr(block: Any) -> sp.csr_matrix:
    matrix = sp.csr_matrix(block, dtype=float)
    matrix.sum_duplicates()
    return matrix


class ProblemSpec(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    N: int
    n: Tuple[int, ...]
    m: Tuple[int, ...]
    d: Tuple[int, ...]
    A: Dict[Tuple[int, int], Any]
    rhs: AdditiveRhs
    mu: int
    objective: ObjectiveSpec

    @field_validator("A", mode="before")
    @classmethod
    def _sparse_blocks(cls, value: Dict[Tuple[int, int], Any]) -> Dict[Tuple[int, int], sp.csr_matrix]:
        return {(int(t), int(tau)): _as_csr(block) for (t, tau), block in value.items()}

    @model_validator(mode="after")
    def _check(self) -> "ProblemSpec":
        N = self.N
        if N < 1:
            raise ValueError("at least one stage is required")
        if self.mu < 1:
            raise ValueError("memory depth must be at least 1")
        for name in ("n", "m", "d"):
            values = getattr(self, name)
            if len(values) != N:
                raise ValueError(f"{name} must list {N} stages")
            if any(v < 1 for v in values):
                raise ValueError(f"{name} entries must be at least 1")
        for (t, tau), block in self.A.items():
            if not 1 <= tau <= t <= N:
                raise ValueError(f"block A^({t},{tau}) outside 1 <= tau <= t <= N")
            if block.shape != (self.m[t - 1], self.n[tau - 1]):
                raise ValueError(
                    f"block A^({t},{tau}) has shape {block.shape}, "
                    f"expected {(self.m[t - 1], self.n[tau - 1])}"
                )
            if not np.all(np.isfinite(block.data)):
                raise ValueError(f"block A^({t},{tau}) has non-finite entries")
        if self.rhs.mu != self.mu:
            raise ValueError(f"rhs memory {self.rhs.mu} differs from mu={self.mu}; widen it first")
        if self.rhs.d != self.d or self.rhs.widths != self.m:
            raise ValueError("rhs table does not match the stage dimensions")
        self._check_objective()
        return self

    def _check_objective(self) -> None:
        obj = self.objective
        if obj.costs is not None:
            if len(obj.costs) != self.N or any(
                c.shape != (k,) for c, k in zip(obj.costs, self.n)
            ):
                raise ValueError("cost vectors must match the decision dimensions")
        if obj.marginals is not None:
            if len(obj.marginals) != self.N or any(
                p.shape != (k,) for p, k in zip(obj.marginals, self.d)
            ):
                raise ValueError("marginals must match the stage cardinalities")
        if obj.scenarios is not None:
            for sc in obj.scenarios:
                if len(sc) != self.N or any(not 1 <= v <= k for v, k in zip(sc, self.d)):
                    raise ValueError(f"scenario {sc} is not a trajectory of D^N")
        if obj.functionals is not None:
            for h in obj.functionals:
                if len(h) != self.N or any(v.shape != (k,) for v, k in zip(h, self.n)):
                    raise ValueError("worst-case functionals must match the decision dimensions")

    def block(self, t: int, tau: int) -> Optional[sp.csr_matrix]:
        return self.A.get((t, tau))

    def space(self, s: int, mu: Optional[int] = None) -> FragmentSpace:
        return FragmentSpace.build(s, self.mu if mu is None else mu, self.d)

    def with_memory(self, mu: int) -> "ProblemSpec":
        if mu == self.mu:
            return self
        return self.model_copy(update={"mu": mu, "rhs": self.rhs.widen(mu)})

    def with_objective(self, objective: ObjectiveSpec) -> "ProblemSpec":
        return self.model_copy(update={"objective": objective})

    def lhs(self, t: int, decisions: Sequence[np.ndarray]) -> np.ndarray:
        """sum_tau A^{t tau} x_tau for the decisions x_1..x_t."""
        total = np.zeros(self.m[t - 1])
        for tau in range(1, t + 1):
            block = self.A.get((t, tau))
            if block is not None:
                total = total + block @ decisions[tau - 1]
        return total


class UncertainMatrixSpec(BaseModel):
    """Memoryless-rule problem whose matrices A^{ts}(xi) vary with the fragment xi."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    base: ProblemSpec
    matrices: Dict[Tuple[int, int], List[Any]]

    @field_validator("matrices", mode="before")
    @classmethod
    def _sparse_lists(cls, value):
        return {(int(t), int(s)): [_as_csr(mat) for mat in mats] for (t, s), mats in value.items()}

    @model_validator(mode="after")
    def _check(self) -> "UncertainMatrixSpec":
        for (t, s) in self.matrices:
            if not 1 <= s <= t <= self.base.N:
                raise ValueError(f"matrix family ({t},{s}) outside 1 <= s <= t <= N")
        return self
