"""Command-line front end: simulate, compare, sets, bench.

Every command writes into an output directory and leaves behind the echoed
effective configuration, so a run can be reproduced from its artifacts alone.
Exit codes are fixed for scripting: 0 success, 2 configuration error,
3 infeasible initial state, 4 numerical failure, 5 empty tightened set.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from . import mpc, qp as qpmod, runtime
from .config import ConfigError
from .mpc import EmptyTightenedSet, MpcError
from .polytope import EmptyResult, support
from .runtime import InfeasibleAtStart, RuntimeFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4
EXIT_EMPTY_SET = 5

SCENARIO_DIR = os.path.join(os.path.dirname(__file__), "scenarios")


def _write(out_dir, name, text):
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        fh.write(text)
    return path


def _load(path, args):
    """Scenario from file with command-line flag overrides applied."""
    scenario = cfgmod.load_scenario(path)
    sched = scenario.schedule
    if args.deterministic:
        sched = cfgmod.ScheduleSection(
            copy_period=sched.copy_period, train_fill=sched.train_fill,
            min_new_samples=sched.min_new_samples, deterministic=True,
            seed=sched.seed)
    if args.seed is not None:
        sched = cfgmod.ScheduleSection(
            copy_period=sched.copy_period, train_fill=sched.train_fill,
            min_new_samples=sched.min_new_samples,
            deterministic=sched.deterministic, seed=args.seed)
    plant_sec = scenario.plant
    if args.root_on_massflow:
        plant_sec = dataclasses.replace(plant_sec, root_on_massflow=True)
    return dataclasses.replace(scenario, schedule=sched, plant=plant_sec)


def _metrics_text(rep):
    lines = []
    for key, val in rep.as_dict().items():
        if isinstance(val, float):
            lines.append("%s = %.17g" % (key, val))
        else:
            lines.append("%s = %d" % (key, val))
    return "\n".join(lines) + "\n"


def cmd_simulate(args) -> int:
    try:
        scenario = _load(args.scenario, args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    _write(args.out, "config.ini", cfgmod.echo_scenario(scenario))
    try:
        trace = runtime.run_closed_loop(scenario)
    except InfeasibleAtStart as exc:
        print("infeasible at start: %s" % exc, file=sys.stderr)
        return EXIT_INFEASIBLE
    except (EmptyTightenedSet, EmptyResult) as exc:
        print("empty tightened set: %s" % exc, file=sys.stderr)
        return EXIT_EMPTY_SET
    except (MpcError, RuntimeFailure, qpmod.QpError) as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return EXIT_NUMERICAL
    rep = runtime.metrics(trace, np.diag(scenario.controller.q_diag),
                          np.array([[scenario.controller.r]]),
                          band=scenario.run.band)
    _write(args.out, "trace.csv", trace.to_csv())
    _write(args.out, "metrics.txt", _metrics_text(rep))
    print("wrote %d steps to %s" % (len(trace), args.out))
    return EXIT_OK


def _figure_dat(names, traces, column) -> str:
    """Gnuplot-style data: step index then one column per scenario."""
    ok = [(n, tr) for n, tr in zip(names, traces) if tr is not None]
    lines = ["# t " + " ".join(n for n, _ in ok)]
    if not ok:
        return lines[0] + "\n"
    T = min(len(tr) for _, tr in ok)
    for t in range(T):
        vals = []
        for _, tr in ok:
            if column == "solver":
                vals.append("%.17g" % tr.solver_time[t])
            else:
                vals.append("%.17g" % tr.x[t, column])
        lines.append("%d %s" % (t, " ".join(vals)))
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    if len(args.scenarios) < 2:
        print("compare needs at least two scenarios", file=sys.stderr)
        return EXIT_CONFIG
    try:
        scenarios = [_load(p, args) for p in args.scenarios]
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    names = [s.name for s in scenarios]
    for s in scenarios:
        _write(args.out, "config_%s.ini" % s.name, cfgmod.echo_scenario(s))
    try:
        report = runtime.compare(scenarios, names=names,
                                 band=scenarios[0].run.band)
    except ValueError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    _write(args.out, "fig_massflow.dat", _figure_dat(names, report.traces, 0))
    _write(args.out, "fig_pressure.dat", _figure_dat(names, report.traces, 1))
    _write(args.out, "fig_solvertime.dat",
           _figure_dat(names, report.traces, "solver"))
    _write(args.out, "metrics.csv", report.table_csv())
    _write(args.out, "aligned.csv", report.aligned_csv())
    failed = [(n, e) for n, e in zip(names, report.errors) if e is not None]
    for name, err in failed:
        print("%s failed: %s" % (name, err), file=sys.stderr)
    if failed:
        if any("InfeasibleAtStart" in e for _, e in failed):
            return EXIT_INFEASIBLE
        return EXIT_NUMERICAL
    print("compared %s into %s" % ("/".join(names), args.out))
    return EXIT_OK


def _omega_invariance_report(setup, samples=10000, seed=0) -> str:
    """Sampled robust-invariance check of the terminal set."""
    omega = setup.omega
    model = setup.model
    A_cl = model.A + model.B @ setup.cfg.K
    d = omega.F.shape[1]
    lo = np.array([-support(omega, -np.eye(d)[i]) for i in range(d)])
    hi = np.array([support(omega, np.eye(d)[i]) for i in range(d)])
    rng = np.random.default_rng(seed)
    w_lo, w_hi = model.W._cache["box_bounds"]
    hits = 0
    violations = 0
    while hits < samples:
        x = rng.uniform(lo, hi)
        if not omega.contains(x):
            continue
        hits += 1
        w = rng.uniform(w_lo, w_hi)
        if not omega.contains(A_cl @ x + w):
            violations += 1
    return ("invariance_samples = %d\ninvariance_violations = %d\n"
            % (samples, violations))


def cmd_sets(args) -> int:
    try:
        scenario = _load(args.scenario, args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    _write(args.out, "config.ini", cfgmod.echo_scenario(scenario))
    try:
        setup = runtime.build_setup(scenario)
    except (EmptyTightenedSet, EmptyResult) as exc:
        print("empty tightened set: %s" % exc, file=sys.stderr)
        return EXIT_EMPTY_SET
    except (MpcError, RuntimeFailure) as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return EXIT_NUMERICAL
    margins = setup.margins
    N = scenario.controller.N
    lines = ["stage," + ",".join("state_m%d" % (i + 1)
                                 for i in range(margins.state.shape[1]))
             + "," + ",".join("input_m%d" % (i + 1)
                              for i in range(margins.inputs.shape[1]))]
    for i in range(N + 1):
        srow = ["%.17g" % v for v in margins.state[i]]
        # the input sequence has N entries; repeat the last for stage N
        irow = ["%.17g" % v for v in margins.inputs[min(i, N - 1)]]
        lines.append("%d,%s,%s" % (i, ",".join(srow), ",".join(irow)))
    _write(args.out, "margins.csv", "\n".join(lines) + "\n")
    _write(args.out, "omega.csv", setup.omega.to_csv())

    report = ["omega_facets = %d" % setup.omega.num_facets]
    empty_stage = None
    X, U = setup.model.X, setup.model.U
    for i in range(N):
        if np.any(X.h - margins.state[i] < 0):
            empty_stage = i
            break
    report.append("tightened_sets_empty = %s"
                  % ("none" if empty_stage is None else str(empty_stage)))
    report.append(_omega_invariance_report(setup).strip())
    _write(args.out, "report.txt", "\n".join(report) + "\n")
    if empty_stage is not None:
        print("empty tightened set at stage %d" % empty_stage, file=sys.stderr)
        return EXIT_EMPTY_SET
    print("wrote set data to %s" % args.out)
    return EXIT_OK


def _time_solves(fn, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    times = np.sort(times)
    return (float(np.median(times)),
            float(times[min(len(times) - 1,
                            int(np.ceil(0.95 * len(times))) - 1)]))


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    rows = ["name,size,reps,cold_median,cold_p95,warm_median,warm_p95"]

    for n in args.sizes:
        L = rng.normal(size=(n, n))
        H = L @ L.T + n * np.eye(n)
        g = rng.normal(size=n)
        G = np.vstack([np.eye(n), -np.eye(n)])
        h_in = np.full(2 * n, 1.0)
        prob = qpmod.QpProblem(H=H, g=g, G=G, h_in=h_in)
        sol = qpmod.qp_solve(prob)
        warm = (sol.x, np.concatenate([sol.lam, sol.nu]), sol.rho_final)
        cold = _time_solves(lambda: qpmod.qp_solve(prob), args.reps)
        warmt = _time_solves(lambda: qpmod.qp_solve(prob, warm_start=warm),
                             args.reps)
        rows.append("qp_solve,%d,%d,%.17g,%.17g,%.17g,%.17g"
                    % (n, args.reps, cold[0], cold[1], warmt[0], warmt[1]))

    scenario = cfgmod.load_scenario(
        args.scenario or os.path.join(SCENARIO_DIR, "dnn.ini"))
    setup = runtime.build_setup(scenario)
    x0 = setup.x0
    base = mpc.solve_lbmpc(setup.problem, x0)
    warm = {"c": base.c, "dual": base.qp_dual, "rho": base.qp_rho}
    cold = _time_solves(lambda: mpc.solve_lbmpc(setup.problem, x0), args.reps)
    warmt = _time_solves(lambda: mpc.solve_lbmpc(setup.problem, x0, warm=warm),
                         args.reps)
    rows.append("solve_lbmpc,%d,%d,%.17g,%.17g,%.17g,%.17g"
                % (setup.problem.n_dec, args.reps, cold[0], cold[1],
                   warmt[0], warmt[1]))

    text = "\n".join(rows) + "\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(args.out, "bench.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="lbmpc", description="learning-based tube MPC experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--deterministic", action="store_true",
                       help="force single-threaded deterministic mode")
        p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
        p.add_argument("--root-on-massflow", action="store_true",
                       help="read sqrt on the mass-flow state instead")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="run one closed-loop scenario")
    p.add_argument("scenario")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run scenarios side by side")
    p.add_argument("scenarios", nargs="+")
    common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sets", help="emit margins and the terminal set")
    p.add_argument("scenario")
    common(p)
    p.set_defaults(func=cmd_sets)

    p = sub.add_parser("bench", help="micro-benchmark the solvers")
    p.add_argument("--sizes", type=int, nargs="+", default=[10, 20, 40])
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--scenario", default=None)
    common(p, needs_out=False)
    p.add_argument("--out", default=None, help="optional output directory")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
