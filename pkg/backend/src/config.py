from pydantic import BaseModel, ConfigDict
from pydantic_settings import BaseSettings
from typing import Dict, Literal


class SolverTolerances(BaseModel):
    """Frozen tolerance record handed to every solver."""

    model_config = ConfigDict(frozen=True)

    feasibility: float = 1e-7
    optimality: float = 1e-9
    pivot: float = 1e-11
    refactor_every: int = 64
    max_iterations: int = 200_000
    pricing: Literal["dantzig", "bland"] = "dantzig"
    degenerate_limit: int = 50


class Settings(BaseSettings):
    # Reference simplex
    feasibility_tol: float = 1e-7
    optimality_tol: float = 1e-9
    pivot_tol: float = 1e-11
    refactor_every: int = 64
    max_iterations: int = 200_000
    pricing: Literal["dantzig", "bland"] = "dantzig"
    degenerate_limit: int = 50

    # Oracle size guards
    max_trajectories: int = 1_000_000
    max_tree_nodes: int = 100_000

    # Simulation
    default_seed: int = 0
    violation_tol: float = 1e-7

    # External solvers: plugin name -> executable path
    plugin_solvers: Dict[str, str] = {}
    plugin_timeout: float = 300.0

    # Logging
    log_level: str = "INFO"
    log_json: bool = False

    class Config:
        env_file = ".env"
        env_prefix = "CDDR_"
        case_sensitive = False

    def tolerances(self) -> SolverTolerances:
        return SolverTolerances(
            feasibility=self.feasibility_tol,
            optimality=self.optimality_tol,
            pivot=self.pivot_tol,
            refactor_every=self.refactor_every,
            max_iterations=self.max_iterations,
            pricing=self.pricing,
            degenerate_limit=self.degenerate_limit,
        )


def get_settings() -> Settings:
    return Settings()
