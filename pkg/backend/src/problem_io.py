"""JSON documents for problems, polytopic problems, rules and hydro configs.

Every index in a document is 1-based: matrix triplets ``[row, col, value]``,
stages, and fragment values (padding stages carry the value 1).
"""
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
import structlog
from pydantic import ValidationError

from .exceptions import SpecValidationError
from .hydro import HydroConfig
from .models import (
    AdditiveRhs,
    AdditiveTable,
    FragmentSpace,
    ObjectiveKind,
    ObjectiveSpec,
    ProblemSpec,
    RuleCoefficients,
    UncertainMatrixSpec,
)
from .polytopic import PolyAffineCoefficients, PolytopeStage, PolytopicProblem, SampleObjective

logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]
FLAT_ORDER = "lexicographic, most recent stage fastest"


def load_json(path: PathLike) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except json.JSONDecodeError as exc:
        raise SpecValidationError(f"{path}: invalid JSON ({exc})") from exc


def dump_json(document: Dict[str, Any], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=2)
        handle.write("\n")


def _invalid(exc: Exception) -> SpecValidationError:
    if isinstance(exc, ValidationError):
        return SpecValidationError(f"invalid document: {exc.errors(include_url=False)}")
    return SpecValidationError(f"invalid document: {exc}")


# -- sparse blocks ----------------------------------------------------------


def _block_from_triplets(triplets: List[List[float]], shape: Tuple[int, int]) -> sp.csr_matrix:
    if not triplets:
        return sp.csr_matrix(shape)
    arr = np.asarray(triplets, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise SpecValidationError("matrix triplets must be [row, col, value] lists")
    rows = arr[:, 0].astype(np.int64) - 1
    cols = arr[:, 1].astype(np.int64) - 1
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= shape[0] or cols.max() >= shape[1]:
        raise SpecValidationError(f"triplet index outside a {shape[0]}x{shape[1]} block")
    return sp.coo_matrix((arr[:, 2], (rows, cols)), shape=shape).tocsr()


def _triplets(block: sp.csr_matrix) -> List[List[float]]:
    coo = block.tocoo()
    order = np.lexsort((coo.col, coo.row))
    return [[int(coo.row[k]) + 1, int(coo.col[k]) + 1, float(coo.data[k])] for k in order]


def _blocks_from_doc(entries: List[Dict[str, Any]], m, n, first: str = "t", second: str = "tau"):
    blocks = {}
    for entry in entries:
        t, tau = int(entry[first]), int(entry[second])
        if not 1 <= tau <= t <= len(m):
            raise SpecValidationError(f"block ({t},{tau}) outside 1 <= {second} <= {first} <= N")
        blocks[(t, tau)] = _block_from_triplets(entry.get("triplets", []), (m[t - 1], n[tau - 1]))
    return blocks


# -- additive tables --------------------------------------------------------


def _table_from_entries(
    entries: List[Dict[str, Any]], d, mu: int, widths, key: str, table_type
) -> AdditiveTable:
    """Sparse ``{t, s, <key>, values}`` rows into a dense table; absent rows are zero."""
    blocks: Dict[Tuple[int, int], np.ndarray] = {}
    for entry in entries:
        t, s = int(entry["t"]), int(entry["s"])
        if not 1 <= s <= t <= len(d):
            raise SpecValidationError(f"coefficient ({t},{s}) outside 1 <= s <= t <= N")
        space = FragmentSpace.build(s, mu, d)
        block = blocks.setdefault((t, s), np.zeros((space.size, widths[t - 1])))
        values = np.asarray(entry["values"], dtype=float)
        if values.shape != (widths[t - 1],):
            raise SpecValidationError(f"coefficient ({t},{s}) needs {widths[t - 1]} values")
        block[space.index([int(v) for v in entry[key]])] += values
    return table_type.from_blocks(d, mu, widths, blocks)


def _table_entries(table: AdditiveTable, key: str) -> List[Dict[str, Any]]:
    entries = []
    for t in range(1, table.N + 1):
        for s in range(1, t + 1):
            block = table.block(t, s)
            space = table.space(s)
            for flat in np.flatnonzero(np.any(block != 0.0, axis=1)):
                entries.append(
                    {"t": t, "s": s, key: list(space.unindex(int(flat))), "values": block[flat].tolist()}
                )
    return entries


# -- objectives -------------------------------------------------------------


def objective_from_dict(doc: Dict[str, Any]) -> ObjectiveSpec:
    kind = ObjectiveKind(doc["kind"])
    if kind == ObjectiveKind.EXPECTED:
        return ObjectiveSpec.expected(doc["costs"], doc["marginals"])
    if kind == ObjectiveKind.SAA:
        return ObjectiveSpec.saa(doc["costs"], doc["scenarios"], doc.get("weights"))
    return ObjectiveSpec.worst_case(doc["functionals"])


def objective_to_dict(objective: ObjectiveSpec) -> Dict[str, Any]:
    doc: Dict[str, Any] = {"kind": objective.kind.value}
    if objective.kind == ObjectiveKind.WORST_CASE:
        doc["functionals"] = [[h.tolist() for h in row] for row in objective.functionals]
        return doc
    doc["costs"] = [c.tolist() for c in objective.costs]
    if objective.kind == ObjectiveKind.EXPECTED:
        doc["marginals"] = [p.tolist() for p in objective.marginals]
    else:
        doc["scenarios"] = [list(sc) for sc in objective.scenarios]
        doc["weights"] = objective.weights.tolist()
    return doc


# -- problems ---------------------------------------------------------------


def problem_from_dict(doc: Dict[str, Any]) -> ProblemSpec:
    """Build a ProblemSpec; ``beta_mu`` (default ``mu``) is the depth the rhs entries use."""
    try:
        N, mu = int(doc["N"]), int(doc["mu"])
        n, m, d = (tuple(int(v) for v in doc[key]) for key in ("n", "m", "d"))
        if not len(n) == len(m) == len(d) == N:
            raise SpecValidationError(f"n, m and d must list {N} stages")
        beta_mu = int(doc.get("beta_mu", mu))
        rhs = _table_from_entries(doc.get("beta", []), d, beta_mu, m, "xi", AdditiveRhs).widen(mu)
        return ProblemSpec(
            N=N,
            n=n,
            m=m,
            d=d,
            A=_blocks_from_doc(doc.get("A", []), m, n),
            rhs=rhs,
            mu=mu,
            objective=objective_from_dict(doc["objective"]),
        )
    except SpecValidationError:
        raise
    except (ValidationError, KeyError, TypeError, ValueError, IndexError) as exc:
        raise _invalid(exc) from exc


def problem_to_dict(spec: ProblemSpec) -> Dict[str, Any]:
    return {
        "N": spec.N,
        "mu": spec.mu,
        "n": list(spec.n),
        "m": list(spec.m),
        "d": list(spec.d),
        "A": [
            {"t": t, "tau": tau, "triplets": _triplets(block)}
            for (t, tau), block in sorted(spec.A.items())
        ],
        "beta": _table_entries(spec.rhs, "xi"),
        "objective": objective_to_dict(spec.objective),
    }


def uncertain_from_dict(doc: Dict[str, Any]) -> UncertainMatrixSpec:
    """A memoryless problem document plus ``matrices`` entries ``{t, s, xi, triplets}``."""
    base = problem_from_dict({**doc, "mu": 1})
    try:
        matrices: Dict[Tuple[int, int], List[sp.csr_matrix]] = {}
        for entry in doc["matrices"]:
            t, s, xi = int(entry["t"]), int(entry["s"]), int(entry["xi"])
            if not 1 <= s <= t <= base.N:
                raise SpecValidationError(f"matrix family ({t},{s}) outside 1 <= s <= t <= N")
            family = matrices.setdefault(
                (t, s), [sp.csr_matrix((base.m[t - 1], base.n[s - 1])) for _ in range(base.d[s - 1])]
            )
            if not 1 <= xi <= base.d[s - 1]:
                raise SpecValidationError(f"realization {xi} outside 1..{base.d[s - 1]} at stage {s}")
            family[xi - 1] = _block_from_triplets(entry.get("triplets", []), (base.m[t - 1], base.n[s - 1]))
        return UncertainMatrixSpec(base=base, matrices=matrices)
    except SpecValidationError:
        raise
    except (ValidationError, KeyError, TypeError, ValueError, IndexError) as exc:
        raise _invalid(exc) from exc


def polytopic_from_dict(doc: Dict[str, Any]) -> PolytopicProblem:
    """``stages`` give vertices (and optionally a basis); ``rhs_poly`` rows are indexed by kappa."""
    try:
        N, mu = int(doc["N"]), int(doc["mu"])
        n, m = (tuple(int(v) for v in doc[key]) for key in ("n", "m"))
        stages = []
        for entry in doc["stages"]:
            stage = PolytopeStage(dim=int(entry["dim"]), vertices=entry["vertices"], basis=entry.get("basis"))
            stage.check_rank()
            stages.append(stage)
        nu = tuple(s.nu for s in stages)
        rhs_poly = _table_from_entries(
            doc.get("rhs_poly", []), nu, int(doc.get("rhs_mu", 1)), m, "kappa", PolyAffineCoefficients
        )
        sample = doc.get("sample_objective")
        return PolytopicProblem(
            N=N,
            n=n,
            m=m,
            A=_blocks_from_doc(doc.get("A", []), m, n),
            stages=stages,
            rhs_poly=rhs_poly,
            mu=mu,
            objective=objective_from_dict(doc["objective"]),
            sample_objective=None if sample is None else SampleObjective(**sample),
        )
    except SpecValidationError:
        raise
    except (ValidationError, KeyError, TypeError, ValueError, IndexError) as exc:
        raise _invalid(exc) from exc


def is_polytopic(doc: Dict[str, Any]) -> bool:
    return "stages" in doc and "rhs_poly" in doc


def is_uncertain(doc: Dict[str, Any]) -> bool:
    return "matrices" in doc


# -- rules ------------------------------------------------------------------


def rule_to_dict(table: AdditiveTable) -> Dict[str, Any]:
    """Dense coefficient blocks with their fragment index metadata."""
    poly = isinstance(table, PolyAffineCoefficients)
    blocks = []
    for t in range(1, table.N + 1):
        for tau in range(1, t + 1):
            space = table.space(tau)
            blocks.append(
                {
                    "t": t,
                    "tau": tau,
                    "fragments": [list(f) for f in space.fragments()],
                    "values": table.block(t, tau).tolist(),
                }
            )
    return {
        "kind": "v" if poly else "u",
        "mu": table.mu,
        "nu" if poly else "d": list(table.d),
        "widths": list(table.widths),
        "order": FLAT_ORDER,
        "blocks": blocks,
    }


def rule_from_dict(doc: Dict[str, Any]) -> AdditiveTable:
    try:
        poly = doc.get("kind", "u") == "v"
        d = tuple(int(v) for v in doc["nu" if poly else "d"])
        widths = tuple(int(v) for v in doc["widths"])
        blocks = {(int(b["t"]), int(b["tau"])): np.asarray(b["values"], dtype=float) for b in doc["blocks"]}
        table_type = PolyAffineCoefficients if poly else RuleCoefficients
        return table_type(d=d, mu=int(doc["mu"]), widths=widths, coefficients=blocks)
    except (ValidationError, KeyError, TypeError, ValueError, IndexError) as exc:
        raise _invalid(exc) from exc


def hydro_config_from_dict(doc: Dict[str, Any]) -> HydroConfig:
    try:
        return HydroConfig(**doc)
    except ValidationError as exc:
        raise _invalid(exc) from exc


def load_problem(path: PathLike) -> ProblemSpec:
    spec = problem_from_dict(load_json(path))
    logger.info("problem_loaded", path=str(path), N=spec.N, mu=spec.mu)
    return spec


def load_rule(path: PathLike, spec: Optional[ProblemSpec] = None) -> RuleCoefficients:
    rule = rule_from_dict(load_json(path))
    if not isinstance(rule, RuleCoefficients):
        raise SpecValidationError(f"{path} holds poly-affine coefficients, not a discrete rule")
    if spec is not None and (rule.d != spec.d or rule.widths != spec.n):
        raise SpecValidationError(f"{path} does not match the problem dimensions")
    return rule
