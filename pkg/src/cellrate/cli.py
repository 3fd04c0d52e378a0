"""Command-line front end.

``cellrate run <config> [--out DIR] [--seed S] [--threads T]`` runs one task
described by a JSON file; ``cellrate plot <dir>...`` turns finished runs into
gnuplot-ready data files.

Exit codes: 0 success, 2 configuration error, 3 solver non-convergence,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_json, parse_config, set_path
from .errors import ConfigError, ConvergenceError
from .fairness import solve_fairness, utility_value, write_convergence_csv
from .geometry import Scenario, all_cluster_problems, gain_matrix
from .limitcore import (PowerAllocation, Weights, optimize_lambda, optimize_powers_alg1, group_rates,
                        weighted_objective)
from .montecarlo import dynamic_scheduler, mc_ergodic_rates, write_scheduler_csv

log = logging.getLogger("cellrate")

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "CELLRATE_THREADS"
LN2 = math.log(2.0)


def fmt(x) -> str:
    return f"{float(x):.12g}"


def _scale(rc: RunConfig) -> float:
    return 1.0 / LN2 if rc.log_base == "bits" else 1.0


def thread_count(cli_value=None) -> int:
    if cli_value is not None:
        n = cli_value
    else:
        env = os.environ.get(THREADS_ENV)
        try:
            n = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from None
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n


@contextmanager
def _executor(threads: int):
    if threads <= 1:
        yield None
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            yield ex


def group_positions_km(scenario: Scenario) -> np.ndarray:
    """Abscissa for rate-vs-position plots.

    Linear layouts use the x coordinate, planar layouts the distance to the
    nearest BS and explicit layouts the group index.
    """
    pos = scenario.group_positions
    if len(pos) != scenario.n_groups or len(scenario.bs_positions) == 0:
        return np.arange(scenario.n_groups, dtype=float)
    if np.all(pos[:, 1] == 0) and np.all(scenario.bs_positions[:, 1] == 0):
        return pos[:, 0].astype(float)
    d = np.linalg.norm(pos[:, None, :] - scenario.bs_positions[None, :, :], axis=-1)
    return d.min(axis=1)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def _write_rates(path, problems, per_cluster_rates, scale):
    rows = []
    for ell, (p, r) in enumerate(zip(problems, per_cluster_rates)):
        for k, grp in enumerate(p.group_index):
            rows.append([ell, grp, fmt(r[k] * scale)])
    _write_rows(path, ["cluster", "group", "rate"], rows)


def _system_trace(results, utility):
    """Merge per-cluster traces into system-level ``(n, utility, gap, _, step)``."""
    n_max = max(len(r.trace) for r in results)
    merged = []
    for n in range(n_max):
        vals, gaps, steps = [], [], []
        for r in results:
            rec = r.trace[min(n, len(r.trace) - 1)]
            vals.append(rec[1])
            gaps.append(rec[2])
            steps.append(rec[4] if n < len(r.trace) else 0.0)
        total = min(vals) if utility.kind == "hfs" else sum(vals)
        merged.append((n, total, sum(gaps), 0.0, max(steps)))
    return merged


def _system_utility(utility, rates):
    try:
        return utility_value(utility, np.concatenate(rates))
    except ValueError:
        return -math.inf


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------

def _global_weights(rc: RunConfig, problem):
    if rc.weights is None:
        return np.ones(problem.A)
    return np.array([rc.weights[k] for k in problem.group_index], dtype=float)


def _task_solve_fairness(rc, problems, out, ex, summary):
    def run(p):
        return solve_fairness(p, rc.utility, rc.lambda_mode, rc.tolerances,
                              conv_tol=rc.conv_tol, max_outer=rc.max_outer)

    results = list(ex.map(run, problems)) if ex is not None else [run(p) for p in problems]
    _write_rates(out / "rates.csv", problems, [r.rates.r for r in results], _scale(rc))
    write_convergence_csv(out / "convergence.csv", _system_trace(results, rc.utility))
    summary["utility_value"] = _system_utility(rc.utility, [r.rates.r * _scale(rc) for r in results])
    summary["clusters"] = [{
        "bs": list(p.bs_index), "groups": list(p.group_index),
        "lambda": r.duals.lam.tolist(), "Q": r.powers.q.tolist(), "weights": r.weights.w.tolist(),
        "converged": r.converged, "iterations": r.iterations, "residual": r.residual,
        "utility_value": r.utility_value,
    } for p, r in zip(problems, results)]
    return all(r.converged for r in results), results


def _task_sum_rate(rc, problems, out, ex, summary):
    def run(p):
        w = Weights(_global_weights(rc, p))
        duals = optimize_lambda(p, w, rc.lambda_mode, rc.tolerances)
        res = optimize_powers_alg1(p, w, duals, rc.tolerances, record_trace=True)
        return w, duals, res, group_rates(p, res.powers, duals, w, rc.tolerances)

    results = list(ex.map(run, problems)) if ex is not None else [run(p) for p in problems]
    _write_rates(out / "rates.csv", problems, [r[3].r for r in results], _scale(rc))
    rows = []
    for ell, (p, (w, duals, res, _)) in enumerate(zip(problems, results)):
        iters = sorted({rec[0] for rec in res.trace})
        for it in iters:
            recs = [rec for rec in res.trace if rec[0] == it]
            q = np.empty(p.A)
            for _, j, qj, _ in recs:
                q[j] = qj
            val = weighted_objective(p, PowerAllocation(q, res.powers.budget), duals, w, rc.tolerances)
            rows.append([it, fmt(val * _scale(rc)), fmt(recs[-1][3] / res.powers.budget), fmt(1.0)])
    _write_rows(out / "convergence.csv", ["n", "utility", "gap", "step"], rows)
    summary["utility_value"] = float(sum(np.dot(r[0].w, r[3].r) for r in results)) * _scale(rc)
    summary["clusters"] = [{
        "bs": list(p.bs_index), "groups": list(p.group_index), "lambda": r[1].lam.tolist(),
        "Q": r[2].powers.q.tolist(), "iterations": r[2].iterations,
        "ratio_residual": r[2].ratio_residual, "zero_set_violation": r[2].zero_set_violation,
    } for p, r in zip(problems, results)]
    return True, results


def _task_validate_mc(rc, problems, out, ex, summary):
    rows, trial_rows, asym_all, clusters = [], [], [], []
    for ell, p in enumerate(problems):
        w = Weights(_global_weights(rc, p))
        duals = optimize_lambda(p, w, rc.lambda_mode, rc.tolerances)
        res = optimize_powers_alg1(p, w, duals, rc.tolerances)
        asym = group_rates(p, res.powers, duals, w, rc.tolerances).r
        seed = rc.seed + ell
        mean, se, samples = mc_ergodic_rates(p, res.powers, duals, w, rc.N, rc.trials, seed,
                                             executor=ex, return_samples=True)
        asym_all.append(asym)
        s = _scale(rc)
        for k, grp in enumerate(p.group_index):
            rel = (mean.r[k] - asym[k]) / asym[k] if asym[k] > 0 else float("nan")
            rows.append([ell, grp, fmt(asym[k] * s), fmt(mean.r[k] * s), fmt(se[k] * s), fmt(rel)])
        for t, row in enumerate(samples):
            for k, grp in enumerate(p.group_index):
                trial_rows.append([ell, t, grp, fmt(row[k] * s)])
        clusters.append({"bs": list(p.bs_index), "groups": list(p.group_index),
                         "lambda": duals.lam.tolist(), "Q": res.powers.q.tolist(),
                         "max_rel_error": float(np.nanmax(np.abs(mean.r - asym) / np.where(asym > 0, asym, np.nan)))
                         if np.any(asym > 0) else 0.0})
    _write_rates(out / "rates.csv", problems, asym_all, _scale(rc))
    _write_rows(out / "mc_vs_asymptotic.csv",
                ["cluster", "group", "asymptotic", "mc_mean", "mc_stderr", "rel_error"], rows)
    _write_rows(out / "trials.csv", ["cluster", "trial", "group", "rate"], trial_rows)
    _write_rows(out / "convergence.csv", ["n", "utility", "gap", "step"], [])
    summary["clusters"] = clusters
    summary["N"], summary["trials"] = rc.N, rc.trials
    return True, None


def _task_dynamic_sim(rc, problems, out, ex, summary):
    converged, results = _task_solve_fairness(rc, problems, out, ex, summary)

    def run(args):
        ell, p = args
        return dynamic_scheduler(p, rc.utility, rc.N, rc.T, rc.seed + ell, V=rc.V, A_max=rc.A_max)

    sims = list(ex.map(run, enumerate(problems))) if ex is not None else [run(a) for a in enumerate(problems)]
    s = _scale(rc)
    rows = []
    for ell, (p, r, sim) in enumerate(zip(problems, results, sims)):
        for k, grp in enumerate(p.group_index):
            a, m = r.rates.r[k], sim.group_rates[k]
            rel = (m - a) / a if a > 0 else float("nan")
            rows.append([ell, grp, fmt(a * s), fmt(m * s), fmt(float(np.std(sim.time_avg_rates[k])) * s), fmt(rel)])
        write_scheduler_csv(out / f"scheduler_cluster{ell}.csv", sim)
    _write_rows(out / "mc_vs_asymptotic.csv",
                ["cluster", "group", "asymptotic", "mc_mean", "mc_user_spread", "rel_error"], rows)
    for c, sim in zip(summary["clusters"], sims):
        c["dynamic"] = {"V": sim.V, "A_max": sim.A_max, "T": rc.T, "N": rc.N,
                        "group_rates": sim.group_rates.tolist()}
    return converged, results


TASK_FUNCS = {
    "solve_fairness": _task_solve_fairness,
    "sum_rate": _task_sum_rate,
    "validate_mc": _task_validate_mc,
    "dynamic_sim": _task_dynamic_sim,
}


def _run_single(rc: RunConfig, out: Path, threads: int) -> int:
    t0 = time.perf_counter()
    problems = all_cluster_problems(rc.scenario, gain_matrix(rc.scenario))
    summary = {"task": rc.task, "version": __version__, "units": rc.log_base,
               "utility": {"kind": rc.utility.kind, "alpha": rc.utility.alpha},
               "lambda_mode": rc.lambda_mode,
               "group_position_km": group_positions_km(rc.scenario).tolist()}
    out.mkdir(parents=True, exist_ok=True)
    with _executor(threads) as ex:
        ok, _ = TASK_FUNCS[rc.task](rc, problems, out, ex, summary)
    summary["converged"] = ok
    summary["wall_time_s"] = time.perf_counter() - t0
    summary["config"] = rc.raw
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
    return EXIT_OK if ok else EXIT_CONVERGENCE


def _run_sweep(rc: RunConfig, out: Path, threads: int, base_dir) -> int:
    sw = rc.sweep
    points = []
    for i, v in enumerate(sw["values"]):
        cfg = set_path(rc.raw, sw["parameter"], v)
        cfg["task"] = sw["task"]
        cfg.pop("sweep", None)
        cfg["output_dir"] = str(out / f"point_{i:03d}")
        points.append((i, v, parse_config(cfg, base_dir)))
    out.mkdir(parents=True, exist_ok=True)

    def run(item):
        i, v, prc = item
        # sweep points share the pool; each point runs its own trials serially
        code = _run_single(prc, out / f"point_{i:03d}", 1)
        with open(out / f"point_{i:03d}" / "summary.json") as fh:
            s = json.load(fh)
        return i, v, code, s.get("utility_value", float("nan"))

    with _executor(threads) as ex:
        rows = list(ex.map(run, points)) if ex is not None else [run(p) for p in points]
    _write_rows(out / "index.csv", ["point", "value", "exit_code", "utility"],
                [[i, json.dumps(v), code, fmt(u)] for i, v, code, u in rows])
    with open(out / "summary.json", "w") as fh:
        json.dump({"task": "sweep", "version": __version__, "parameter": sw["parameter"],
                   "points": len(rows), "config": rc.raw}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return max(code for _, _, code, _ in rows)


def run(config_path, out=None, seed=None, threads=None) -> int:
    """Execute one run file; returns the process exit code."""
    try:
        cfg = load_json(config_path)
        base_dir = Path(config_path).parent
        rc = parse_config(cfg, base_dir, seed=seed, output_dir=out)
        n_threads = thread_count(threads)
        if rc.output_dir is None:
            raise ConfigError("no output directory (use --out or output_dir)")
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    out_dir = Path(rc.output_dir)
    try:
        if rc.task == "sweep":
            return _run_sweep(rc, out_dir, n_threads, base_dir)
        return _run_single(rc, out_dir, n_threads)
    except ConvergenceError as exc:
        log.error("solver did not converge: %s", exc)
        return EXIT_CONVERGENCE
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

def _read_rates(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["group"]))
    return np.array([float(r["rate"]) for r in rows])


def _read_trace(path):
    with open(path, newline="") as fh:
        return [(int(r["n"]), float(r["utility"])) for r in csv.DictReader(fh)]


def _label(summary, directory):
    coop = summary.get("config", {}).get("scenario", {}).get("clusters", {}) or {}
    return str(coop.get("cooperation", Path(directory).name)) if isinstance(coop, dict) else Path(directory).name


def emit_plot_data(dirs, out=None):
    """Merge finished runs into ``rate_vs_position.dat`` and ``utility_vs_iter.dat``.

    Raises ``FileNotFoundError`` for missing inputs and ``ValueError`` when
    the runs disagree on the group count or positions.
    """
    if not dirs:
        raise ValueError("need at least one run directory")
    runs = []
    for d in dirs:
        d = Path(d)
        with open(d / "summary.json") as fh:
            summary = json.load(fh)
        runs.append((summary, _read_rates(d / "rates.csv"), _read_trace(d / "convergence.csv"), d))
    n = len(runs[0][1])
    pos = np.asarray(runs[0][0].get("group_position_km", list(range(n))), dtype=float)
    for summary, rates, _, d in runs[1:]:
        if len(rates) != n:
            raise ValueError(f"{d}: {len(rates)} groups, expected {n}")
        p2 = np.asarray(summary.get("group_position_km", list(range(n))), dtype=float)
        if p2.shape != pos.shape or np.max(np.abs(p2 - pos)) > 1e-9:
            raise ValueError(f"{d}: group positions differ")
    out = Path(out) if out is not None else Path(dirs[0])
    out.mkdir(parents=True, exist_ok=True)
    labels = [_label(s, d) for s, _, _, d in runs]
    units = runs[0][0].get("units", "bits")
    order = np.argsort(pos, kind="stable")
    with open(out / "rate_vs_position.dat", "w") as fh:
        fh.write(f"# position_km {' '.join('rate_' + l for l in labels)}  [{units}]\n")
        for k in order:
            fh.write(" ".join([fmt(pos[k])] + [fmt(r[k]) for _, r, _, _ in runs]) + "\n")
    n_iter = max((len(t) for _, _, t, _ in runs), default=0)
    with open(out / "utility_vs_iter.dat", "w") as fh:
        fh.write(f"# n {' '.join('utility_' + l for l in labels)}\n")
        for i in range(n_iter):
            cols = [str(i)]
            for _, _, t, _ in runs:
                cols.append(fmt(t[i][1]) if i < len(t) else "NaN")
            fh.write(" ".join(cols) + "\n")
    return out / "rate_vs_position.dat", out / "utility_vs_iter.dat"


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cellrate", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"cellrate {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="execute a run config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.add_argument("--seed", type=int, help="random seed (overrides the config)")
    r.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    p = sub.add_parser("plot", help="write gnuplot data from run directories")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out", help="directory for the .dat files (default: first run)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return run(args.config, args.out, args.seed, args.threads)
    try:
        emit_plot_data(args.dirs, args.out)
    except (FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        log.error("missing or unreadable input: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
