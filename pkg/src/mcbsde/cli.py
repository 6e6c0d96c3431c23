"""Command line front end: scenario in, deterministic artifacts out.

Every run writes ``report.json`` into the output directory; `solve`,
`minimal` and markovian `price` also write ``curves.csv`` (columns t, state,
u), and `simulate` writes ``paths.csv`` (columns path_id, time, state with
one row for the start of each path and one per jump). Reports embed the
fully normalized scenario, so defaults and CLI overrides are always visible
in the artifact. All output is byte-identical across runs for a fixed
scenario, seed and package version.

Failures exit with code 2 (validation) or 3 (numerical) and leave a
machine-readable ``error.json`` carrying the stable error code.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .chain import check_wellposedness, simulate_paths
from .envelope import compare_minimal, solve_minimal
from .errors import McbsdeError, ScenarioValidationError
from .market import price_european
from .markovian import CONTINUOUS, solve_lipschitz
from .scenario import Scenario, parse_scenario
from .tree import build_tree, solve_tree
from .verify import run_all

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcbsde",
        description="BSDE solvers driven by finite-state Markov chains",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_flags = argparse.ArgumentParser(add_help=False)
    run_flags.add_argument("--scenario", required=True, help="scenario JSON file")
    run_flags.add_argument("--out", required=True, help="output directory")
    run_flags.add_argument("--seed", type=int, default=None, help="override seed")
    run_flags.add_argument("--steps", type=int, default=None, help="override steps")
    run_flags.add_argument(
        "--budget", type=int, default=None, help="override tree node budget"
    )
    run_flags.add_argument(
        "--strict", action="store_true", help="refuse ill-posed problems"
    )

    sim = sub.add_parser(
        "simulate", parents=[run_flags], help="sample chain paths to paths.csv"
    )
    sim.add_argument("--paths", type=int, default=100, help="number of paths")
    sub.add_parser(
        "solve", parents=[run_flags], help="solve the scenario BSDE"
    )
    sub.add_parser(
        "minimal", parents=[run_flags],
        help="minimal solution of a continuous-driver BSDE",
    )
    sub.add_parser(
        "compare", parents=[run_flags],
        help="order the scenario pair against its compare block",
    )
    sub.add_parser(
        "price", parents=[run_flags], help="price the terminal payoff in the market"
    )
    ver = sub.add_parser("verify", help="run the built-in property suite")
    ver.add_argument("--out", default=None, help="directory for report.json")
    ver.add_argument("--seed", type=int, default=0, help="base seed for the checks")
    return parser


def _load_scenario(args) -> Scenario:
    scenario = parse_scenario(Path(args.scenario).read_bytes())
    if (
        args.seed is None
        and args.steps is None
        and args.budget is None
        and not args.strict
    ):
        return scenario
    doc = copy.deepcopy(scenario.normalized)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.steps is not None:
        doc["solver"]["steps"] = args.steps
    if args.budget is not None:
        doc["solver"]["budget"] = args.budget
    if args.strict:
        doc["solver"]["strict"] = True
    return parse_scenario(json.dumps(doc))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(text.encode("utf-8"))


def _write_report(out: Path, payload: dict) -> None:
    _write(out / "report.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_curves(out: Path, grid, u) -> None:
    lines = ["t,state,u"]
    for k, t in enumerate(grid):
        for i in range(u.shape[1]):
            lines.append(f"{float(t)!r},{i},{float(u[k, i])!r}")
    _write(out / "curves.csv", "\n".join(lines) + "\n")


def _report_skeleton(command: str, scenario: Scenario | None) -> dict:
    out = {"command": command, "version": __version__}
    if scenario is not None:
        out["scenario"] = scenario.normalized
    return out


def _cmd_simulate(scenario: Scenario, out: Path, n_paths: int) -> int:
    if n_paths < 1:
        raise ScenarioValidationError("--paths must be >= 1")
    paths = simulate_paths(scenario.schedule, scenario.x0, scenario.seed, n_paths)
    lines = ["path_id,time,state"]
    for pid, path in enumerate(paths):
        lines.append(f"{pid},{0.0!r},{path.initial}")
        for t, s in zip(path.times, path.states):
            lines.append(f"{pid},{float(t)!r},{int(s)}")
    _write(out / "paths.csv", "\n".join(lines) + "\n")

    counts = np.zeros(scenario.n_states, dtype=int)
    for path in paths:
        counts[path.state_at(scenario.horizon)] += 1
    report = _report_skeleton("simulate", scenario)
    report["simulation"] = {
        "n_paths": n_paths,
        "horizon": scenario.horizon,
        "total_jumps": int(sum(p.n_jumps for p in paths)),
        "terminal_counts": [int(c) for c in counts],
    }
    _write_report(out, report)
    return 0


def _cmd_solve(scenario: Scenario, out: Path) -> int:
    driver = scenario.driver.build()
    report = _report_skeleton("solve", scenario)
    wp = check_wellposedness(scenario.schedule, driver.l2)
    report["audits"] = {
        "wellposedness": {
            "holds": wp.holds,
            "value": wp.worst_value,
            "margin": wp.margin,
        }
    }
    if scenario.mode == "tree":
        tree = build_tree(
            scenario.schedule, scenario.x0, scenario.steps, budget=scenario.budget
        )
        sol = solve_tree(tree, driver, scenario.terminal)
        report["solution"] = {"root": sol.root}
    else:
        sol = solve_lipschitz(
            driver,
            scenario.terminal,
            scenario.schedule,
            steps=scenario.steps,
            strict=scenario.strict,
        )
        report["solution"] = {
            "root": sol.value_at(0.0, scenario.x0),
            "root_values": [float(v) for v in sol.u[0]],
        }
        _write_curves(out, sol.grid, sol.u)
    _write_report(out, report)
    return 0


def _cmd_minimal(scenario: Scenario, out: Path) -> int:
    if scenario.driver.kind != CONTINUOUS:
        raise ScenarioValidationError(
            "minimal needs a driver with kind 'continuous'"
        )
    result = solve_minimal(
        scenario.driver.build(),
        scenario.terminal,
        scenario.schedule,
        steps=scenario.steps,
        tol=scenario.tol,
        n_schedule=scenario.n_schedule,
        strict=scenario.strict,
    )
    report = _report_skeleton("minimal", scenario)
    report["minimal"] = {
        "converged": result.converged,
        "n_sequence": [int(n) for n in result.n_sequence],
        "sup_diffs": [float(d) for d in result.sup_diffs],
        "monotonicity_worst": float(result.monotonicity_worst),
        "monotone": result.monotonicity_worst <= 1e-9,
        "envelope_gap": float(result.envelope_gap),
        "root": result.final.value_at(0.0, scenario.x0),
        "root_values": [float(v) for v in result.final.u[0]],
        "final_max_abs": float(np.abs(result.final.u).max()),
    }
    _write_report(out, report)
    _write_curves(out, result.final.grid, result.final.u)
    return 0


def _cmd_compare(scenario: Scenario, out: Path) -> int:
    if scenario.compare_driver is None:
        raise ScenarioValidationError("compare needs a 'compare' block")
    result = compare_minimal(
        scenario.driver.build(),
        scenario.compare_driver.build(),
        scenario.terminal,
        scenario.compare_terminal,
        scenario.schedule,
        steps=scenario.steps,
        tol=scenario.tol,
        n_schedule=scenario.n_schedule or None,
        seed=scenario.seed,
    )
    report = _report_skeleton("compare", scenario)
    report["compare"] = {
        "holds": result.holds,
        "worst_gap": float(result.worst_gap),
        "lower_root": result.report_f.final.value_at(0.0, scenario.x0),
        "upper_root": result.report_g.final.value_at(0.0, scenario.x0),
        "lower_converged": result.report_f.converged,
        "upper_converged": result.report_g.converged,
    }
    _write_report(out, report)
    return 0


def _cmd_price(scenario: Scenario, out: Path) -> int:
    if scenario.market is None:
        raise ScenarioValidationError("price needs a 'market' block")
    result = price_european(
        scenario.market,
        scenario.terminal,
        steps=scenario.steps,
        mode=scenario.mode,
        x0=scenario.x0,
        budget=scenario.budget,
        strict=scenario.strict,
    )
    report = _report_skeleton("price", scenario)
    report["price"] = {"price0": float(result.price0), "mode": scenario.mode}
    if scenario.mode == "markovian":
        sol = result.solution
        report["price"]["root_values"] = [float(v) for v in sol.u[0]]
        _write_curves(out, sol.grid, sol.u)
    _write_report(out, report)
    return 0


def _cmd_verify(out: Path | None, seed: int) -> int:
    results = run_all(seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    failed = sum(not r.passed for r in results)
    report = _report_skeleton("verify", None)
    report["verify"] = {
        "checks": [
            {"name": r.name, "passed": r.passed, "detail": r.detail}
            for r in results
        ],
        "total": len(results),
        "passed": len(results) - failed,
        "failed": failed,
    }
    if out is not None:
        _write_report(out, report)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 3


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out is not None else None
    try:
        if args.command == "verify":
            return _cmd_verify(out, args.seed)
        scenario = _load_scenario(args)
        if args.command == "simulate":
            return _cmd_simulate(scenario, out, args.paths)
        if args.command == "solve":
            return _cmd_solve(scenario, out)
        if args.command == "minimal":
            return _cmd_minimal(scenario, out)
        if args.command == "compare":
            return _cmd_compare(scenario, out)
        return _cmd_price(scenario, out)
    except McbsdeError as err:
        record = {
            "command": args.command,
            "code": err.code,
            "message": str(err),
            "exit_code": err.exit_code,
        }
        if out is not None:
            _write(
                out / "error.json",
                json.dumps(record, indent=2, sort_keys=True) + "\n",
            )
        print(f"error[{err.code}]: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
