"""Shared instance factories for the test suite."""
import numpy as np
import pytest
import scipy.sparse as sp

from src.models import AdditiveRhs, ObjectiveSpec, ProblemSpec, RuleCoefficients


def forced_instance(objective: str = "expected") -> ProblemSpec:
    """N=1, d=2: -x <= -beta with beta=(1,2), so x(xi) = beta_xi at the optimum."""
    rhs = AdditiveRhs.from_blocks((2,), 1, (1,), {(1, 1): [[-1.0], [-2.0]]})
    if objective == "expected":
        obj = ObjectiveSpec.expected([[1.0]], [[0.5, 0.5]])
    else:
        obj = ObjectiveSpec.worst_case([[[1.0]]])
    return ProblemSpec(N=1, n=(1,), m=(1,), d=(2,), A={(1, 1): [[-1.0]]}, rhs=rhs, mu=1, objective=obj)


def random_marginals(rng, d):
    marginals = []
    for k in d:
        p = rng.uniform(0.2, 1.0, size=k)
        p = p / p.sum()
        p[-1] = 1.0 - p[:-1].sum()
        marginals.append(p)
    return marginals


def random_spec(rng, N, d, mu, n, m, density=0.7) -> ProblemSpec:
    """Unstructured instance: random sparse blocks and rhs at depth mu."""
    A = {}
    for t in range(1, N + 1):
        for tau in range(1, t + 1):
            block = rng.normal(size=(m[t - 1], n[tau - 1]))
            block[rng.uniform(size=block.shape) > density] = 0.0
            if block.any():
                A[(t, tau)] = block
    beta = {
        (t, s): rng.normal(size=(int(np.prod([d[r - 1] if r >= 1 else 1 for r in range(s - mu + 1, s + 1)])), m[t - 1]))
        for t in range(1, N + 1)
        for s in range(1, t + 1)
    }
    rhs = AdditiveRhs.from_blocks(d, mu, m, beta)
    costs = [rng.uniform(0.5, 1.5, size=k) for k in n]
    return ProblemSpec(
        N=N,
        n=tuple(n),
        m=tuple(m),
        d=tuple(d),
        A=A,
        rhs=rhs,
        mu=mu,
        objective=ObjectiveSpec.expected(costs, random_marginals(rng, d)),
    )


def tracking_instance(rng, N, d, mu=1) -> ProblemSpec:
    """One decision per stage with 0 <= lower(xi^t) <= x_t <= 10 and x_t >= x_{t-1} / 2.

    The lower bound is additive over the whole trajectory, so longer memory
    pays off; every instance is feasible and bounded.
    """
    A, beta = {}, {}
    for t in range(1, N + 1):
        A[(t, t)] = np.array([[1.0], [-1.0], [-1.0]])
        if t > 1:
            A[(t, t - 1)] = np.array([[0.0], [0.0], [0.5]])
        for s in range(1, t + 1):
            block = np.zeros((d[s - 1], 3))
            block[:, 1] = -rng.uniform(0.0, 0.5, size=d[s - 1])
            if s == t:
                block[:, 0] = 10.0
            beta[(t, s)] = block
    rhs = AdditiveRhs.from_blocks(d, 1, (3,) * N, beta).widen(mu)
    return ProblemSpec(
        N=N,
        n=(1,) * N,
        m=(3,) * N,
        d=tuple(d),
        A=A,
        rhs=rhs,
        mu=mu,
        objective=ObjectiveSpec.expected([[1.0]] * N, random_marginals(rng, d)),
    )


def random_rule(rng, spec: ProblemSpec, mu=None, scale=1.0) -> RuleCoefficients:
    mu = spec.mu if mu is None else mu
    zero = RuleCoefficients.from_blocks(spec.d, mu, spec.n)
    blocks = {key: scale * rng.normal(size=block.shape) for key, block in zero.coefficients.items()}
    return RuleCoefficients(d=spec.d, mu=mu, widths=spec.n, coefficients=blocks)


def random_shape(rng, max_N=4, max_d=3, max_mu=3, max_dim=3):
    N = int(rng.integers(1, max_N + 1))
    return (
        N,
        tuple(int(v) for v in rng.integers(1, max_d + 1, size=N)),
        int(rng.integers(1, max_mu + 1)),
        tuple(int(v) for v in rng.integers(1, max_dim + 1, size=N)),
        tuple(int(v) for v in rng.integers(1, max_dim + 1, size=N)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def forced():
    return forced_instance()


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ("CDDR_PLUGIN_SOLVERS", "CDDR_PRICING", "CDDR_MAX_TRAJECTORIES", "CDDR_MAX_TREE_NODES"):
        monkeypatch.delenv(name, raising=False)


def as_dense(block):
    return block.toarray() if sp.issparse(block) else np.asarray(block)
