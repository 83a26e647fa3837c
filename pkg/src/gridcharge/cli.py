"""Command-line experiment runner.

Subcommands:
    run       one simulation, writing series.csv and vehicles.csv
    sweep     arrival-rate grid x ensemble with a resume manifest and
              a summary CSV of ensemble statistics
    stats     recompute the summary CSV from existing sweep outputs
    audit     re-solve recorded states and check rank-1 certificates
    validate  parse and check a network file

Configuration precedence: command-line flags > JSON config file (--config)
> built-in defaults.  The environment variable GRIDCHARGE_SOLVER_TOL
overrides the solver tolerance everywhere.  Exit codes: 0 success,
1 runtime failure, 2 usage error.

Output layout of a sweep: <out>/lam<rate>_<algo>/run<k>/{series.csv,
vehicles.csv}; a top-level manifest.json records the plan hash, per-cell
seeds and completion; summary.csv holds one row per (rate, algorithm).
Floats are written with repr (shortest round-trip decimal).
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, asdict

import numpy as np

from . import allocation, conic, netmodel, simulate, stats

__all__ = ["ExperimentPlan", "main", "run_sweep", "sweep_summary", "audit_runs"]

SUMMARY_COLUMNS = [
    "lambda", "algorithm", "eta_mean", "eta_lo", "eta_hi",
    "chi_mean", "chi_lo", "chi_hi", "gini_mean", "gini_lo", "gini_hi",
    "runs", "window",
]


@dataclass(frozen=True)
class ExperimentPlan:
    network: str
    algorithms: tuple
    rates: tuple
    runs: int
    horizon: float
    out: str
    seed: int = 0
    step: float = 1.0
    alpha: float = 0.1
    jobs: int = 0                  # 0: number of processors
    window: float = stats.DEFAULT_WINDOW
    trim: float = stats.DEFAULT_TRIM
    solver_tolerance: float | None = None
    ci_method: str = "normal"
    pin_root: bool = False

    def __post_init__(self):
        if not self.rates:
            raise ValueError("empty arrival-rate grid")
        if any(r <= 0 for r in self.rates):
            raise ValueError("arrival rates must be positive")
        if self.runs < 1:
            raise ValueError("need at least one run per cell")
        for algo in self.algorithms:
            if algo not in ("mf", "pf"):
                raise ValueError(f"unknown algorithm {algo!r}")

    def cells(self):
        for rate in self.rates:
            for algo in self.algorithms:
                for k in range(self.runs):
                    yield (rate, algo, k)

    def cell_dir(self, rate, algo, k) -> str:
        return os.path.join(self.out, f"lam{rate!r}_{algo}", f"run{k}")

    def cell_id(self, rate, algo, k) -> str:
        return f"lam={rate!r}|algo={algo}|run={k}"

    def cell_seed(self, rate, algo, k) -> int:
        return self.seed + k

    def plan_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _solver_config(tolerance: float | None) -> conic.SolverConfig | None:
    if tolerance is None:
        return None
    return conic.SolverConfig(tolerance=tolerance, max_iterations=400)


def _run_config(plan: ExperimentPlan, tree, rate, algo, k) -> simulate.SimulationConfig:
    return simulate.SimulationConfig(
        network=tree,
        arrival_rate=rate,
        horizon=plan.horizon,
        seed=plan.cell_seed(rate, algo, k),
        algorithm=algo,
        step=plan.step,
        alpha=plan.alpha,
        pin_root=plan.pin_root,
        solver=_solver_config(plan.solver_tolerance),
    )


def _execute_cell(args):
    """Worker for one (rate, algorithm, run-index) cell; process-pool safe."""
    plan, rate, algo, k = args
    tree = netmodel.validate_tree(netmodel.load_network(plan.network))
    config = _run_config(plan, tree, rate, algo, k)
    out = simulate.run(config)
    cell = plan.cell_dir(rate, algo, k)
    os.makedirs(cell, exist_ok=True)
    simulate.write_series_csv(out, os.path.join(cell, "series.csv"))
    simulate.write_vehicles_csv(out, os.path.join(cell, "vehicles.csv"))
    return plan.cell_id(rate, algo, k), {
        "seed": config.seed,
        "status": "done",
        "solves": out.solve_count,
        "max_certificate_gap": out.max_certificate_gap,
        "certificate_retries": out.certificate_retries,
    }


def _manifest_path(plan: ExperimentPlan) -> str:
    return os.path.join(plan.out, "manifest.json")


def _load_manifest(plan: ExperimentPlan) -> dict:
    path = _manifest_path(plan)
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("hash") == plan.plan_hash():
            return manifest
    return {"hash": plan.plan_hash(), "plan": asdict(plan), "cells": {}}


def _save_manifest(plan: ExperimentPlan, manifest: dict) -> None:
    os.makedirs(plan.out, exist_ok=True)
    with open(_manifest_path(plan), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def run_sweep(plan: ExperimentPlan, echo=print) -> dict:
    """Run every incomplete cell of the plan; returns the updated manifest.

    A cell already marked done (same plan hash) is skipped, so interrupted
    sweeps resume.  Failed cells are recorded and do not stop the others.
    """
    manifest = _load_manifest(plan)
    cells = list(plan.cells())
    pending = [
        c for c in cells
        if manifest["cells"].get(plan.cell_id(*c), {}).get("status") != "done"
    ]
    echo(f"sweep: {len(cells)} cells, {len(pending)} to run")
    jobs = plan.jobs if plan.jobs > 0 else (os.cpu_count() or 1)
    jobs = max(1, min(jobs, len(pending) or 1))
    failures = []
    if pending:
        tasks = [(plan, *c) for c in pending]
        if jobs == 1:
            for task in tasks:
                try:
                    cell_id, record = _execute_cell(task)
                except Exception as exc:
                    cell_id = plan.cell_id(*task[1:])
                    record = {"status": "failed", "error": str(exc)}
                    failures.append((cell_id, str(exc)))
                manifest["cells"][cell_id] = record
                _save_manifest(plan, manifest)
        else:
            with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = {
                    pool.submit(_execute_cell, task): task[1:] for task in tasks
                }
                for fut in concurrent.futures.as_completed(futures):
                    cell = futures[fut]
                    try:
                        cell_id, record = fut.result()
                    except Exception as exc:
                        cell_id = plan.cell_id(*cell)
                        record = {"status": "failed", "error": str(exc)}
                        failures.append((cell_id, str(exc)))
                    manifest["cells"][cell_id] = record
                    _save_manifest(plan, manifest)
    for cell_id, record in manifest["cells"].items():
        if record.get("status") == "failed":
            failures.append((cell_id, record.get("error", "")))
    manifest["failures"] = sorted(set(failures))
    _save_manifest(plan, manifest)
    return manifest


def _load_cell_output(plan: ExperimentPlan, tree, rate, algo, k):
    cell = plan.cell_dir(rate, algo, k)
    times, n, power, objective = simulate.read_series_csv(os.path.join(cell, "series.csv"))
    vehicles = simulate.read_vehicles_csv(os.path.join(cell, "vehicles.csv"))
    config = _run_config(plan, tree, rate, algo, k)
    return simulate.RunOutput(
        config=config, times=times, n_vehicles=n, aggregate_power=power,
        objective=objective,
        completed=[v for v in vehicles if v.departure_time is not None],
        active_at_end=[v for v in vehicles if v.departure_time is None],
        solve_count=0, certificate_retries=0, max_certificate_gap=0.0,
    )


def sweep_summary(plan: ExperimentPlan, echo=print) -> list:
    """Ensemble statistics per completed (rate, algorithm); rows sorted."""
    manifest = _load_manifest(plan)
    tree = netmodel.validate_tree(netmodel.load_network(plan.network))
    records = []
    for rate in plan.rates:
        for algo in plan.algorithms:
            outputs = []
            for k in range(plan.runs):
                if manifest["cells"].get(plan.cell_id(rate, algo, k), {}).get("status") == "done":
                    outputs.append(_load_cell_output(plan, tree, rate, algo, k))
            if not outputs:
                echo(f"skipping lam={rate!r} algo={algo}: no completed runs")
                continue
            records.append(stats.summarize_runs(
                outputs, window=plan.window, trim=plan.trim, method=plan.ci_method
            ))
    return records


def write_summary_csv(records, path) -> None:
    rows = sorted(records, key=lambda r: (r.arrival_rate, r.algorithm))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for r in rows:
            writer.writerow([
                repr(r.arrival_rate), r.algorithm,
                repr(r.eta_mean), repr(r.eta_lo), repr(r.eta_hi),
                repr(r.chi_mean), repr(r.chi_lo), repr(r.chi_hi),
                repr(r.gini_mean), repr(r.gini_lo), repr(r.gini_hi),
                r.runs, repr(r.window),
            ])


def audit_runs(plan: ExperimentPlan, sample: int, seed: int, echo=print):
    """Reconstruct occupancies at sampled times from recorded vehicles and
    re-solve them, reporting certificate pass rate and worst gap."""
    manifest = _load_manifest(plan)
    done = [
        cell for cell in plan.cells()
        if manifest["cells"].get(plan.cell_id(*cell), {}).get("status") == "done"
    ]
    if not done:
        return None
    tree = netmodel.validate_tree(netmodel.load_network(plan.network))
    index = netmodel.subtree_index(tree)
    rng = np.random.Generator(np.random.PCG64(seed))
    checked = 0
    failures = 0
    worst = 0.0
    solver = _solver_config(plan.solver_tolerance)
    for _ in range(sample):
        rate, algo, k = done[int(rng.integers(0, len(done)))]
        vehicles = simulate.read_vehicles_csv(
            os.path.join(plan.cell_dir(rate, algo, k), "vehicles.csv")
        )
        if not vehicles:
            continue
        t = float(rng.uniform(0.0, plan.horizon))
        step_start = math.floor(t / plan.step) * plan.step
        occupied = [
            v.node for v in vehicles
            if math.floor(v.arrival_time / plan.step) * plan.step <= step_start
            and (v.departure_time is None or v.departure_time > step_start)
        ]
        if not occupied:
            continue
        occ = allocation.Occupancy.from_nodes(occupied)
        checked += 1
        try:
            result = allocation.solve_allocation(
                tree, index, occ, algo, alpha=plan.alpha, config=solver,
                pin_root=plan.pin_root,
            )
            worst = max(worst, result.certificate.max_relative_gap)
        except allocation.InexactRelaxationError as exc:
            failures += 1
            worst = max(worst, exc.certificate.max_relative_gap)
    return {"checked": checked, "failures": failures, "max_relative_gap": worst}


# ----------------------------------------------------------------------------
# argument handling


def _parse_grid(text: str) -> tuple:
    """Grid spec 'a:b:s' inclusive of both ends (to float tolerance)."""
    try:
        a, b, s = (float(part) for part in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}, expected a:b:s") from exc
    if s <= 0 or b < a:
        raise argparse.ArgumentTypeError(f"bad grid bounds {text!r}")
    rates = []
    k = 0
    while True:
        value = round(a + k * s, 10)
        if value > b + 1e-9:
            break
        rates.append(value)
        k += 1
    return tuple(rates)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridcharge",
        description="EV-charging congestion experiments on radial networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sweep=False):
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--network", help="network CSV file")
        p.add_argument("--algo", choices=["mf", "pf"], action="append",
                       help="allocation algorithm (repeatable for sweeps)")
        p.add_argument("--horizon", type=float, help="simulation horizon (time units)")
        p.add_argument("--step", type=float, help="time step (default 1.0)")
        p.add_argument("--alpha", type=float, help="voltage band half-width (default 0.1)")
        p.add_argument("--seed", type=int, help="base seed (default 0)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--window", type=float, help="statistics window (default 100)")
        p.add_argument("--trim", type=float, help="transient trim (default 1000)")
        if sweep:
            p.add_argument("--lambda", dest="rate", type=float, action="append",
                           help="arrival rate grid point (repeatable)")
            p.add_argument("--grid", type=_parse_grid, help="rate grid a:b:s")
            p.add_argument("--runs", type=int, help="runs per grid cell (default 5)")
            p.add_argument("--jobs", type=int, help="parallel workers (default: processors)")
        else:
            p.add_argument("--lambda", dest="rate", type=float, help="arrival rate")

    p_run = sub.add_parser("run", help="run one simulation")
    common(p_run)
    p_sweep = sub.add_parser("sweep", help="run a rate grid with ensembles")
    common(p_sweep, sweep=True)
    p_stats = sub.add_parser("stats", help="recompute the sweep summary")
    common(p_stats, sweep=True)
    p_audit = sub.add_parser("audit", help="re-solve recorded states and certify")
    common(p_audit, sweep=True)
    p_audit.add_argument("--sample", type=int, default=200, help="states to sample")
    p_val = sub.add_parser("validate", help="check a network file")
    p_val.add_argument("--network", required=True)
    return parser


class UsageError(Exception):
    pass


def _merged(args, key, default=None):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if getattr(args, "_config", None) and key in args._config:
        return args._config[key]
    return default


def _require(args, key, flag):
    value = _merged(args, key)
    if value is None:
        raise UsageError(f"missing required option {flag}")
    return value


def _env_tolerance():
    raw = os.environ.get("GRIDCHARGE_SOLVER_TOL")
    return float(raw) if raw else None


def _plan_from_args(args) -> ExperimentPlan:
    rates = getattr(args, "rate", None)
    if isinstance(rates, float):
        rates = [rates]
    grid = _merged(args, "grid")
    if isinstance(grid, str):
        grid = _parse_grid(grid)
    all_rates = tuple(grid or ()) + tuple(rates or ())
    if not all_rates:
        cfg_rate = _merged(args, "rate")
        if cfg_rate:
            all_rates = tuple(cfg_rate) if isinstance(cfg_rate, (list, tuple)) else (cfg_rate,)
    if not all_rates:
        raise UsageError("no arrival rates given (--lambda or --grid)")
    if any(r <= 0 for r in all_rates):
        raise UsageError("arrival rates must be positive")
    algos = _merged(args, "algo") or ["mf", "pf"]
    if isinstance(algos, str):
        algos = [algos]
    tolerance = _env_tolerance()
    if tolerance is None:
        tolerance = _merged(args, "solver_tolerance")
    return ExperimentPlan(
        network=_require(args, "network", "--network"),
        algorithms=tuple(algos),
        rates=tuple(sorted(set(all_rates))),
        runs=int(_merged(args, "runs", 5) or 5),
        horizon=float(_require(args, "horizon", "--horizon")),
        out=_require(args, "out", "--out"),
        seed=int(_merged(args, "seed", 0) or 0),
        step=float(_merged(args, "step", 1.0) or 1.0),
        alpha=float(_merged(args, "alpha", 0.1) or 0.1),
        jobs=int(_merged(args, "jobs", 0) or 0),
        window=float(_merged(args, "window", stats.DEFAULT_WINDOW) or stats.DEFAULT_WINDOW),
        trim=float(_merged(args, "trim", stats.DEFAULT_TRIM) or stats.DEFAULT_TRIM),
        solver_tolerance=tolerance,
        ci_method=str(_merged(args, "ci_method", "normal") or "normal"),
        pin_root=bool(_merged(args, "pin_root", False)),
    )


def _cmd_run(args, echo) -> int:
    network_path = _require(args, "network", "--network")
    if not os.path.exists(network_path):
        raise UsageError(f"network file not found: {network_path}")
    rate = _require(args, "rate", "--lambda")
    if rate < 0:
        raise UsageError(f"arrival rate must be non-negative, got {rate}")
    tree = netmodel.validate_tree(netmodel.load_network(network_path))
    algos = _merged(args, "algo") or ["pf"]
    config = simulate.SimulationConfig(
        network=tree,
        arrival_rate=rate,
        horizon=float(_require(args, "horizon", "--horizon")),
        seed=int(_merged(args, "seed", 0) or 0),
        algorithm=algos[0] if isinstance(algos, list) else algos,
        step=float(_merged(args, "step", 1.0) or 1.0),
        alpha=float(_merged(args, "alpha", 0.1) or 0.1),
        pin_root=bool(_merged(args, "pin_root", False)),
        solver=_solver_config(_env_tolerance() or _merged(args, "solver_tolerance")),
    )
    out_dir = _require(args, "out", "--out")
    os.makedirs(out_dir, exist_ok=True)
    output = simulate.run(config)
    simulate.write_series_csv(output, os.path.join(out_dir, "series.csv"))
    simulate.write_vehicles_csv(output, os.path.join(out_dir, "vehicles.csv"))
    echo(
        f"run complete: {output.solve_count} solves, "
        f"{len(output.completed)} vehicles charged, "
        f"max certificate gap {output.max_certificate_gap:.2e}"
    )
    return 0


def _cmd_sweep(args, echo) -> int:
    plan = _plan_from_args(args)
    if not os.path.exists(plan.network):
        raise UsageError(f"network file not found: {plan.network}")
    manifest = run_sweep(plan, echo)
    records = sweep_summary(plan, echo)
    write_summary_csv(records, os.path.join(plan.out, "summary.csv"))
    if manifest.get("failures"):
        for cell_id, error in manifest["failures"]:
            echo(f"FAILED {cell_id}: {error}")
        return 1
    echo(f"summary written to {os.path.join(plan.out, 'summary.csv')}")
    return 0


def _cmd_stats(args, echo) -> int:
    plan = _plan_from_args(args)
    records = sweep_summary(plan, echo)
    if not records:
        echo("no completed cells to summarize")
        return 1
    write_summary_csv(records, os.path.join(plan.out, "summary.csv"))
    echo(f"summary written to {os.path.join(plan.out, 'summary.csv')}")
    return 0


def _cmd_audit(args, echo) -> int:
    plan = _plan_from_args(args)
    report = audit_runs(plan, sample=args.sample, seed=plan.seed, echo=echo)
    if report is None:
        echo("warning: no completed runs to audit")
        return 0
    echo(
        f"audited {report['checked']} states: {report['failures']} certificate "
        f"failures, max relative gap {report['max_relative_gap']:.3e}"
    )
    return 1 if report["failures"] else 0


def _cmd_validate(args, echo) -> int:
    path = args.network
    if not os.path.exists(path):
        raise UsageError(f"network file not found: {path}")
    spec = netmodel.load_network(path)
    tree = netmodel.validate_tree(spec)
    depth = max(tree.depth.values()) if tree.depth else 0
    echo(
        f"{path}: {len(spec.nodes)} nodes, {len(spec.edges)} edges, "
        f"root {spec.root}, voltage {spec.nominal_voltage}, max depth {depth}"
    )
    if spec.prune_hint:
        pruned = netmodel.prune_nodes(spec, spec.prune_hint)
        netmodel.validate_tree(pruned)
        echo(f"prune metadata {list(spec.prune_hint)} leaves {len(pruned.nodes)} nodes")
    return 0


def main(argv=None, echo=print) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    config_path = getattr(args, "config", None)
    args._config = {}
    if config_path:
        if not os.path.exists(config_path):
            echo(f"error: config file not found: {config_path}")
            return 2
        with open(config_path, encoding="utf-8") as fh:
            args._config = json.load(fh)
    handlers = {
        "run": _cmd_run,
        "sweep": _cmd_sweep,
        "stats": _cmd_stats,
        "audit": _cmd_audit,
        "validate": _cmd_validate,
    }
    try:
        return handlers[args.command](args, echo)
    except UsageError as exc:
        echo(f"error: {exc}")
        return 2
    except (netmodel.NetworkParseError, netmodel.TreeValidationError) as exc:
        echo(f"error: {exc}")
        return 2
    except allocation.AllocationError as exc:
        echo(f"solver failure: {exc}")
        return 1
    except OSError as exc:
        echo(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
