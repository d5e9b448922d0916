"""Command-line front end: build, solve, simulate, hydro-gen, oracle, export-mps.

Results go to standard output (or ``--out``); logs and errors go to standard
error, errors as one JSON object per failure.
"""
import argparse
import json
import sys
from typing import Any, Dict, NoReturn, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from pydantic import ValidationError

from .config import get_settings
from .exceptions import CddrError, SpecValidationError
from .hydro import generate
from .logging_config import configure_logging
from .lp import SparseLp, write_mps
from .models import ProblemSpec, RuleCoefficients, UncertainMatrixSpec
from .oracle import feasibility_verdict, minimal_z_root, tree_verdict
from .policy import exhaustive_scenarios, sample_scenarios, simulate
from .polytopic import PolyAffineCoefficients, PolytopicLpBuilder, PolytopicProblem, discretize, solve_polytopic, v_to_u
from .problem_io import (
    dump_json,
    hydro_config_from_dict,
    is_polytopic,
    is_uncertain,
    load_json,
    polytopic_from_dict,
    problem_from_dict,
    problem_to_dict,
    rule_from_dict,
    rule_to_dict,
    uncertain_from_dict,
)
from .reformulate import (
    SizeReport,
    build_lp,
    build_memoryless_uncertain_matrix_lp,
    solve_assembled,
    solve_cddr,
)
from .solvers import get_solver

logger = structlog.get_logger(__name__)

Problem = Union[ProblemSpec, UncertainMatrixSpec, PolytopicProblem]


def read_problem(path: str, mu: Optional[int] = None) -> Problem:
    """Load any problem document; ``mu`` overrides the file's memory depth."""
    doc = load_json(path)
    if is_uncertain(doc):
        if mu not in (None, 1):
            raise SpecValidationError("uncertain-matrix problems only admit memoryless rules")
        return uncertain_from_dict(doc)
    if mu is not None:
        if mu < 1:
            raise SpecValidationError("--mu must be at least 1")
        doc = dict(doc)
        if not is_polytopic(doc):
            doc.setdefault("beta_mu", doc.get("mu"))
        doc["mu"] = mu
    if is_polytopic(doc):
        return polytopic_from_dict(doc)
    return problem_from_dict(doc)


def assemble(problem: Problem) -> Tuple[SparseLp, SizeReport]:
    if isinstance(problem, PolytopicProblem):
        lp, assembled, _ = PolytopicLpBuilder(problem).build()
        return lp, assembled.counts
    if isinstance(problem, UncertainMatrixSpec):
        assembled = build_memoryless_uncertain_matrix_lp(problem)
    else:
        assembled = build_lp(problem)
    return assembled.to_sparse(), assembled.counts


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as handle:
            handle.write(text)
    else:
        sys.stdout.write(text)


def _dumps(payload: Dict[str, Any]) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _save_npz(lp: SparseLp, path: str) -> None:
    matrix = lp.matrix.tocsr()
    np.savez(
        path,
        objective=lp.objective,
        data=matrix.data,
        indices=matrix.indices,
        indptr=matrix.indptr,
        shape=np.array(matrix.shape),
        senses=np.array([s.value for s in lp.senses]),
        rhs=lp.rhs,
        lower=lp.lower,
        upper=lp.upper,
        col_names=np.array([lp.column_name(j) for j in range(lp.n_cols)]),
        row_names=np.array([lp.row_name(i) for i in range(lp.n_rows)]),
    )


# -- subcommands ------------------------------------------------------------


def cmd_build(args: argparse.Namespace) -> int:
    lp, counts = assemble(read_problem(args.problem, args.mu))
    summary = counts.model_dump()
    summary.update(n_vars=counts.n_vars, n_rows=lp.n_rows, within_bound=counts.within_bound())
    if args.out:
        if args.format == "mps":
            _emit(write_mps(lp), args.out)
        else:
            _save_npz(lp, args.out)
        summary["lp_file"] = args.out
    _emit(_dumps(summary), None)
    return 0


def cmd_solve(args: argparse.Namespace) -> int:
    problem = read_problem(args.problem, args.mu)
    solver = get_solver(args.solver)
    summary: Dict[str, Any] = {"solver": args.solver}
    if isinstance(problem, PolytopicProblem):
        solution = solve_polytopic(problem, solver)
        rule_doc = rule_to_dict(solution.v)
    else:
        if isinstance(problem, UncertainMatrixSpec):
            solution = solve_assembled(build_memoryless_uncertain_matrix_lp(problem), solver)
        else:
            solution = solve_cddr(problem, solver)
        rule_doc = rule_to_dict(solution.rule)
        summary.update(solution.assembled.counts.model_dump())
        summary["worst_case_value"] = solution.worst_case_value
    summary.update(status=solution.result.status.value, value=solution.value, iterations=solution.result.iterations)
    if args.out:
        dump_json(rule_doc, args.out)
        summary["rule_file"] = args.out
    _emit(_dumps(summary), None)
    return 0


def _discrete_pair(problem: Problem, rule_doc: Dict[str, Any]) -> Tuple[ProblemSpec, RuleCoefficients]:
    table = rule_from_dict(rule_doc)
    if isinstance(problem, PolytopicProblem):
        if not isinstance(table, PolyAffineCoefficients):
            raise SpecValidationError("a polytopic problem is simulated with a poly-affine rule file")
        if table.widths != problem.n:
            raise SpecValidationError("rule widths do not match the problem dimensions")
        return discretize(problem), v_to_u(table, problem.stages)
    if isinstance(problem, UncertainMatrixSpec):
        raise SpecValidationError("simulation of uncertain-matrix problems is not supported")
    if isinstance(table, PolyAffineCoefficients):
        raise SpecValidationError("a poly-affine rule needs a polytopic problem file")
    if table.d != problem.d or table.widths != problem.n:
        raise SpecValidationError("rule dimensions do not match the problem")
    mu = max(problem.mu, table.mu)
    return problem.with_memory(mu), table.widen(mu)


def cmd_simulate(args: argparse.Namespace) -> int:
    spec, rule = _discrete_pair(read_problem(args.problem), load_json(args.rule))
    if args.exhaustive:
        scenarios = exhaustive_scenarios(spec)
    else:
        scenarios = sample_scenarios(spec, args.scenarios, args.seed)
    report = simulate(spec, rule, scenarios=scenarios, keep_traces=args.traces)
    _emit(report.to_json() + "\n" if args.format == "json" else report.to_table(), args.out)
    return 0


def cmd_hydro_gen(args: argparse.Namespace) -> int:
    params, model = hydro_config_from_dict(load_json(args.params)).resolve()
    document = problem_to_dict(generate(params, model))
    if args.out:
        dump_json(document, args.out)
    else:
        _emit(json.dumps(document, indent=2) + "\n", None)
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    problem = read_problem(args.problem, args.mu)
    if not isinstance(problem, ProblemSpec):
        raise SpecValidationError("the oracles work on discrete problem files")
    solver = get_solver(args.solver)
    if args.mode == "tree":
        verdict = tree_verdict(problem, solver)
        payload = {
            "mode": "tree",
            "mu": verdict.mu,
            "cddr_value": verdict.cddr_value,
            "tree_value": verdict.tree_value,
            "gap": verdict.gap,
            "equal": verdict.equal(),
        }
    else:
        if args.rule:
            spec, rule = _discrete_pair(problem, load_json(args.rule))
        else:
            spec, rule = problem, solve_cddr(problem, solver).rule
        verdict = feasibility_verdict(spec, rule, solver)
        payload = {
            "mode": "feasibility",
            "lp_feasible": verdict.lp_feasible,
            "brute_feasible": verdict.brute_feasible,
            "agree": verdict.agree,
            "maxima": {str(t): v for t, v in verdict.maxima.items()},
        }
        if verdict.lp_feasible:
            roots = minimal_z_root(spec, rule, solver)
            payload["dp_tight"] = all(
                np.allclose(roots[t], verdict.maxima[t], rtol=0.0, atol=1e-9) for t in roots
            )
    _emit(_dumps(payload), args.out)
    return 0


def cmd_export_mps(args: argparse.Namespace) -> int:
    lp, _ = assemble(read_problem(args.problem, args.mu))
    _emit(write_mps(lp), args.out)
    return 0


# -- parser -----------------------------------------------------------------


def _positive(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return number


class _JsonArgumentParser(argparse.ArgumentParser):
    """Usage errors go to stderr in the same JSON shape as command failures."""

    def error(self, message: str) -> NoReturn:
        sys.stderr.write(json.dumps({"error": "UsageError", "message": f"{self.prog}: {message}"}) + "\n")
        self.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _JsonArgumentParser(prog="cddr", description="Constant depth decision rule toolkit")
    parser.add_argument("--log-level", default=None, help="override CDDR_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_problem(name: str, help_text: str) -> argparse.ArgumentParser:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("problem", help="problem JSON file")
        cmd.add_argument("--mu", type=_positive, default=None, help="memory depth override")
        return cmd

    build = with_problem("build", "assemble the LP and print its size report")
    build.add_argument("--format", choices=["mps", "npz"], default="mps")
    build.add_argument("--out", default=None, help="write the assembled LP here")
    build.set_defaults(handler=cmd_build)

    solve = with_problem("solve", "solve the CDDR LP and write the rule file")
    solve.add_argument("--solver", default="reference", help="reference | highs | plugin:NAME")
    solve.add_argument("--out", default=None, help="rule JSON file")
    solve.set_defaults(handler=cmd_solve)

    sim = sub.add_parser("simulate", help="simulate a rule on scenario trajectories")
    sim.add_argument("problem")
    sim.add_argument("rule")
    mode = sim.add_mutually_exclusive_group(required=True)
    mode.add_argument("--scenarios", type=_positive)
    mode.add_argument("--exhaustive", action="store_true")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--format", choices=["json", "table"], default="json")
    sim.add_argument("--traces", action="store_true", help="keep per-scenario decisions")
    sim.add_argument("--out", default=None)
    sim.set_defaults(handler=cmd_simulate)

    hydro = sub.add_parser("hydro-gen", help="generate a hydro-thermal problem file")
    hydro.add_argument("params", help="hydro parameter JSON file")
    hydro.add_argument("--out", default=None)
    hydro.set_defaults(handler=cmd_hydro_gen)

    oracle = with_problem("oracle", "compare the reformulation against brute force")
    oracle.add_argument("--mode", choices=["feasibility", "tree"], default="feasibility")
    oracle.add_argument("--rule", default=None, help="rule file to verify (feasibility mode)")
    oracle.add_argument("--solver", default="reference")
    oracle.add_argument("--out", default=None)
    oracle.set_defaults(handler=cmd_oracle)

    export = with_problem("export-mps", "write the assembled LP in MPS format")
    export.add_argument("out", help="MPS output path")
    export.set_defaults(handler=cmd_export_mps)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(level=args.log_level)
    if getattr(args, "seed", 0) is None:
        args.seed = get_settings().default_seed
    try:
        return args.handler(args)
    except (CddrError, ValidationError, OSError) as exc:
        logger.error("command_failed", command=args.command, error=type(exc).__name__)
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
