"""Dual-timescale closed loop: real-time control with a background trainer.

The fast loop runs measure -> solve -> apply -> adapt -> log every sampling
period; the slow loop retrains the oracle's hidden stack on buffered data and
hands finished snapshots back.  In deterministic mode both collapse onto one
thread (training happens inline at the scheduled step); in concurrent mode the
trainer runs alongside and weight snapshots travel through one-slot mailboxes,
so the control loop never blocks.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import mpc, oracle as om, plant
from .polytope import Polytope, max_invariant_set


class RuntimeFailure(Exception):
    pass


class InfeasibleAtStart(RuntimeFailure):
    """The very first MPC solve has no feasible solution."""


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class ScheduleConfig:
    """Trainer timing: when weights are copied out and swapped back in.

    ``copy_period`` is the number of control steps between trainer events
    (the T_k sequence); training only fires once the buffer holds at least
    ``train_fill`` of its capacity and ``min_new_samples`` new labels have
    arrived since the previous event.
    """

    copy_period: int = 50
    train_fill: float = 0.05
    min_new_samples: int = 32
    deterministic: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.copy_period < 1:
            raise ValueError("copy_period must be >= 1")
        if not (0.0 < self.train_fill <= 1.0):
            raise ValueError("train_fill must be in (0, 1]")
        if self.min_new_samples < 1:
            raise ValueError("min_new_samples must be >= 1")


# ---------------------------------------------------------------------------
# trace


TRACE_COLUMNS = (
    ["t"]
    + ["x%d" % (i + 1) for i in range(4)]
    + ["u"]
    + ["hhat%d" % (i + 1) for i in range(4)]
    + ["h%d" % (i + 1) for i in range(4)]
    + ["xtilde%d" % (i + 1) for i in range(4)]
    + ["k_fro", "generation", "status", "sqp_iters", "solver_time",
       "state_margin", "input_margin", "shift_feasible", "h_in_w"]
)


@dataclass
class ClosedLoopTrace:
    """Per-step log of a closed-loop run, one row per control step.

    Column order is fixed (see TRACE_COLUMNS): time index, deviation state,
    applied input, oracle prediction h_hat, realized residual h, one-step
    prediction error x_tilde, output-layer Frobenius norm, live oracle
    generation, solver status / SQP iterations / wall time, worst-case state
    and input constraint margins (positive = satisfied), and the two
    certificate flags (shifted candidate feasible, realized h inside W).
    """

    x: np.ndarray
    u: np.ndarray
    h_hat: np.ndarray
    h: np.ndarray
    x_tilde: np.ndarray
    k_fro: np.ndarray
    generation: np.ndarray
    status: List[str]
    sqp_iters: np.ndarray
    solver_time: np.ndarray
    state_margin: np.ndarray
    input_margin: np.ndarray
    shift_feasible: np.ndarray
    h_in_w: np.ndarray
    swap_steps: List[int] = field(default_factory=list)
    x_ref: np.ndarray = field(default_factory=lambda: np.zeros(4))
    u_ref: np.ndarray = field(default_factory=lambda: np.zeros(1))
    # deterministic-mode runs promise byte-identical CSVs, so the (inherently
    # nonreproducible) wall-time column is written as zero; the measured
    # times stay available in memory for metrics and benchmarks
    deterministic: bool = False

    def __post_init__(self):
        n = self.x.shape[0]
        for name in ("u", "h_hat", "h", "x_tilde", "k_fro", "generation",
                     "sqp_iters", "solver_time", "state_margin",
                     "input_margin", "shift_feasible", "h_in_w"):
            if getattr(self, name).shape[0] != n or len(self.status) != n:
                raise ValueError("trace arrays must share the row count")

    def __len__(self):
        return self.x.shape[0]

    def to_csv(self) -> str:
        lines = [",".join(TRACE_COLUMNS)]
        solver_col = (np.zeros_like(self.solver_time) if self.deterministic
                      else self.solver_time)
        for t in range(len(self)):
            row = [str(t)]
            row += ["%.17g" % v for v in self.x[t]]
            row += ["%.17g" % v for v in self.u[t]]
            row += ["%.17g" % v for v in self.h_hat[t]]
            row += ["%.17g" % v for v in self.h[t]]
            row += ["%.17g" % v for v in self.x_tilde[t]]
            row += ["%.17g" % self.k_fro[t], "%d" % self.generation[t],
                    self.status[t], "%d" % self.sqp_iters[t],
                    "%.17g" % solver_col[t],
                    "%.17g" % self.state_margin[t],
                    "%.17g" % self.input_margin[t],
                    "%d" % self.shift_feasible[t], "%d" % self.h_in_w[t]]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# scenario -> controller assembly


@dataclass
class LoopSetup:
    """Everything run_closed_loop needs, assembled once from a scenario."""

    params: plant.MooreGreitzerParams
    sim: plant.TruthSimulator
    model: plant.PlantModel
    cfg: mpc.ControllerConfig
    omega: Polytope
    margins: object
    problem: mpc.LbmpcProblem
    oracle_kind: str
    oracle_adapter: object
    dnn_state: Optional[om.OracleState]
    buffer: Optional[om.ReplayBuffer]
    l2nw: Optional[om.L2nwEstimator]
    x0: np.ndarray


def _w_halfwidths(W: Polytope) -> np.ndarray:
    lo, hi = W._cache["box_bounds"]
    return np.maximum(np.abs(lo), np.abs(hi))


def build_setup(scenario) -> LoopSetup:
    """Instantiate plant, sets, gains and oracle from a validated scenario."""
    pc, cc, oc = scenario.plant, scenario.controller, scenario.oracle
    params = plant.MooreGreitzerParams(beta=pc.beta, z_c=pc.z_c, zeta=pc.zeta,
                                       omega_n=pc.omega_n, T=pc.T)
    sim = plant.TruthSimulator(params, substeps=pc.substeps,
                               root_on_massflow=pc.root_on_massflow)
    model0 = plant.linearize_discretize(params,
                                        root_on_massflow=pc.root_on_massflow)
    W = plant.estimate_W(model0, params, samples=pc.w_samples,
                         inflation=pc.w_inflation, substeps=pc.substeps,
                         root_on_massflow=pc.root_on_massflow,
                         region_scale=pc.w_region)
    model = model0.with_W(W)
    Q = np.diag(cc.q_diag)
    R = np.array([[cc.r]])
    K = mpc.synthesize_tube_gain(model, Q, R, target=cc.tube_margin_target)
    P = mpc.solve_lyapunov_P(model, K, Q, R)
    cfg = mpc.ControllerConfig(N=cc.N, Q=Q, R=R, K=K, P=P,
                               x_ref=np.zeros(model.d), u_ref=np.zeros(model.m))
    A_cl = model.A + model.B @ K
    omega = max_invariant_set(A_cl, model.X, model.U, K, W).omega
    margins = mpc.build_margins(model, cfg, omega)

    kind = oc.kind
    dnn_state = None
    buf = None
    l2nw = None
    if kind == "zero":
        adapter = mpc.ZeroOracle()
    elif kind == "dnn":
        arch = om.NetworkArch(n_in=model.d + model.m, hidden=tuple(oc.hidden),
                              n_out=model.d)
        W_bar = oc.w_bar_factor * _w_halfwidths(W)
        dnn_state = om.new_oracle(arch, W_bar, oc.gamma,
                                  seed=scenario.schedule.seed)
        adapter = mpc.DnnOracle(dnn_state)
        buf = om.ReplayBuffer(capacity=oc.buffer_capacity,
                              policy=oc.buffer_policy)
    elif kind == "l2nw":
        lo_x, hi_x = plant.STATE_BOUNDS_ABS
        widths = np.concatenate([hi_x - lo_x,
                                 [plant.INPUT_BOUNDS_ABS[1]
                                  - plant.INPUT_BOUNDS_ABS[0]]])
        diameter = float(np.linalg.norm(widths))
        bw = oc.l2nw_bandwidth if oc.l2nw_bandwidth > 0 else \
            oc.l2nw_bandwidth_factor * diameter
        l2nw = om.L2nwEstimator(capacity=oc.buffer_capacity,
                                n_in=model.d + model.m, n_out=model.d,
                                bandwidth=bw, lam=oc.l2nw_lambda)
        adapter = mpc.L2nwOracle(l2nw)
    else:
        raise ValueError("unknown oracle kind %r" % kind)

    problem = mpc.LbmpcProblem(model, cfg, omega, margins, adapter,
                               sqp_max_iter=cc.sqp_max_iter,
                               sqp_tol=cc.sqp_tol)
    x0 = np.asarray(scenario.run.x0, dtype=float)
    return LoopSetup(params=params, sim=sim, model=model, cfg=cfg, omega=omega,
                     margins=margins, problem=problem, oracle_kind=kind,
                     oracle_adapter=adapter, dnn_state=dnn_state, buffer=buf,
                     l2nw=l2nw, x0=x0)


# ---------------------------------------------------------------------------
# trainer plumbing


class Mailbox:
    """One-slot overwrite mailbox; take() empties the slot."""

    def __init__(self):
        self._lock = threading.Lock()
        self._slot = None

    def put(self, item):
        with self._lock:
            self._slot = item

    def take(self):
        with self._lock:
            item, self._slot = self._slot, None
        return item


class _BatchShim:
    """Frozen buffer snapshot exposing the sample() the trainer expects."""

    def __init__(self, X, H):
        self.X = X
        self.H = H

    def __len__(self):
        return self.X.shape[0]

    def sample(self, M, rng):
        idx = rng.choice(len(self), size=M, replace=False)
        return self.X[idx], self.H[idx]


def _trainer_worker(inbox: Mailbox, outbox: Mailbox, stop: threading.Event,
                    train_batch, train_epochs, train_lr):
    while not stop.is_set():
        job = inbox.take()
        if job is None:
            stop.wait(1e-4)
            continue
        state, shim, seed = job
        M = min(train_batch, len(shim))
        hidden, loss = om.train_hidden(state, shim, M, train_epochs,
                                       lr=train_lr, seed=seed)
        outbox.put((hidden, loss))


# ---------------------------------------------------------------------------
# the loop


def run_closed_loop(scenario) -> ClosedLoopTrace:
    """Run the scenario's closed loop and return the per-step trace.

    Raises InfeasibleAtStart if the first solve has no feasible solution;
    later steps always produce an input because the shifted previous solution
    is a feasible fallback (a failure there is a RuntimeFailure).
    """
    setup = build_setup(scenario)
    ss = scenario.schedule
    sched = ScheduleConfig(copy_period=ss.copy_period,
                           train_fill=ss.train_fill,
                           min_new_samples=ss.min_new_samples,
                           deterministic=ss.deterministic, seed=ss.seed)
    oc = scenario.oracle
    steps = scenario.run.steps
    model = setup.model
    problem = setup.problem
    W = model.W

    n = steps
    d, m = model.d, model.m
    tr_x = np.zeros((n, d))
    tr_u = np.zeros((n, m))
    tr_hhat = np.zeros((n, d))
    tr_h = np.zeros((n, d))
    tr_xt = np.zeros((n, d))
    tr_kfro = np.zeros(n)
    tr_gen = np.zeros(n, dtype=int)
    tr_status: List[str] = []
    tr_sqp = np.zeros(n, dtype=int)
    tr_time = np.zeros(n)
    tr_smargin = np.zeros(n)
    tr_imargin = np.zeros(n)
    tr_shift = np.zeros(n, dtype=bool)
    tr_hw = np.zeros(n, dtype=bool)
    swap_steps: List[int] = []

    state = setup.dnn_state
    adapter = setup.oracle_adapter
    buf = setup.buffer

    concurrent = setup.oracle_kind == "dnn" and not sched.deterministic
    inbox = outbox = None
    stop = None
    worker = None
    if concurrent:
        inbox, outbox, stop = Mailbox(), Mailbox(), threading.Event()
        worker = threading.Thread(target=_trainer_worker,
                                  args=(inbox, outbox, stop, oc.train_batch,
                                        oc.train_epochs, oc.train_lr),
                                  daemon=True)
        worker.start()

    x = setup.x0.copy()
    warm = None
    samples_since_train = 0
    try:
        for t in range(steps):
            # collect a finished hidden stack before this step's solve
            if concurrent:
                done = outbox.take()
                if done is not None:
                    state = om.swap_hidden(state, done[0])
                    adapter.state = state
                    swap_steps.append(t)

            try:
                sol = mpc.solve_lbmpc(problem, x, warm=warm)
            except mpc.MpcError as exc:
                if t == 0:
                    raise InfeasibleAtStart(
                        "no feasible solution at x0 = %s: %s" % (x, exc))
                raise RuntimeFailure(
                    "solver failed at step %d despite fallback: %s" % (t, exc))

            u = sol.u
            phi = None
            if state is not None:
                # cache the exact feature vector of the generation that
                # produced u, so adapt stays consistent across swaps
                phi = om.features(state, x, u)
                h_hat = om.predict_from_features(state, phi)
            else:
                h_hat = np.asarray(adapter.predict(x, u), dtype=float)

            x_abs_next = setup.sim.step(x + model.x_eq, u + model.u_eq)
            x_next = x_abs_next - model.x_eq
            h = plant.truth_residual(x, u, x_next, model)
            x_tilde = (model.A @ x + model.B @ u + h_hat) - x_next

            c_shift = mpc.shift_solution(sol, m)
            tr_x[t] = x
            tr_u[t] = u
            tr_hhat[t] = h_hat
            tr_h[t] = h
            tr_xt[t] = x_tilde
            tr_kfro[t] = (np.linalg.norm(state.K) if state is not None else 0.0)
            tr_gen[t] = state.generation if state is not None else 0
            tr_status.append(sol.status)
            tr_sqp[t] = sol.sqp_iters
            tr_time[t] = sol.wall_time
            tr_smargin[t] = float(np.min(model.X.h - model.X.F @ x))
            tr_imargin[t] = float(np.min(model.U.h - model.U.F @ u))
            tr_shift[t] = problem.feasible(x_next, c_shift)
            tr_hw[t] = W.contains(h)

            if state is not None:
                state = om.adapt(state, x, u, x_next, model, phi=phi)
                adapter.state = state
                buf = om.buffer_push(buf, np.concatenate([x, u]), h)
                samples_since_train += 1
            if setup.l2nw is not None:
                setup.l2nw.push(np.concatenate([x, u]), h)

            if (state is not None and t > 0 and t % sched.copy_period == 0
                    and len(buf) >= sched.train_fill * buf.capacity
                    and samples_since_train >= sched.min_new_samples):
                samples_since_train = 0
                seed = sched.seed + t
                if sched.deterministic:
                    M = min(oc.train_batch, len(buf))
                    hidden, _ = om.train_hidden(state, buf, M,
                                                oc.train_epochs,
                                                lr=oc.train_lr, seed=seed)
                    state = om.swap_hidden(state, hidden)
                    adapter.state = state
                    swap_steps.append(t)
                else:
                    shim = _BatchShim(np.stack(buf.inputs),
                                      np.stack(buf.labels))
                    inbox.put((state, shim, seed))

            warm = {"c": c_shift, "dual": sol.qp_dual, "rho": sol.qp_rho}
            x = x_next
    finally:
        if concurrent:
            stop.set()
            worker.join(timeout=5.0)

    return ClosedLoopTrace(x=tr_x, u=tr_u, h_hat=tr_hhat, h=tr_h, x_tilde=tr_xt,
                           k_fro=tr_kfro, generation=tr_gen, status=tr_status,
                           sqp_iters=tr_sqp, solver_time=tr_time,
                           state_margin=tr_smargin, input_margin=tr_imargin,
                           shift_feasible=tr_shift, h_in_w=tr_hw,
                           swap_steps=swap_steps,
                           x_ref=setup.cfg.x_ref.copy(),
                           u_ref=setup.cfg.u_ref.copy(),
                           deterministic=sched.deterministic)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsReport:
    overshoot_z: float
    overshoot_y: float
    settling_steps: int
    rise_steps: int
    cost: float
    solver_median: float
    solver_p95: float
    solver_max: float

    def as_dict(self):
        return {
            "overshoot_z": self.overshoot_z,
            "overshoot_y": self.overshoot_y,
            "settling_steps": self.settling_steps,
            "rise_steps": self.rise_steps,
            "cost": self.cost,
            "solver_median": self.solver_median,
            "solver_p95": self.solver_p95,
            "solver_max": self.solver_max,
        }


def metrics(trace: ClosedLoopTrace, Q, R, band: float = 0.02) -> MetricsReport:
    """Transient-response and solver-time summary of one trace.

    Overshoot is the largest excursion of mass flow / pressure rise past the
    reference on the far side of the approach direction.  Settling is the
    first step after which the state stays within ``band`` of the initial
    error (infinity norm); a trace that never settles reports its length.
    Rise is the first step at which 90 percent of the initial error is gone.
    """
    if len(trace) == 0:
        raise ValueError("empty trace")
    if not (0.0 < band < 1.0):
        raise ValueError("band must be in (0, 1)")
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    dx = trace.x - trace.x_ref
    du = trace.u - trace.u_ref
    err = np.max(np.abs(dx), axis=1)
    e0 = err[0]

    def overshoot(i):
        direction = -np.sign(dx[0, i])
        if direction == 0.0:
            return float(np.max(np.abs(dx[:, i])))
        return float(max(0.0, np.max(direction * dx[:, i])))

    if e0 == 0.0:
        settling = 0
        rise = 0
    else:
        inside = err <= band * e0
        settling = len(trace)
        for t in range(len(trace)):
            if inside[t:].all():
                settling = t
                break
        risen = np.where(err <= 0.1 * e0)[0]
        rise = int(risen[0]) if risen.size else len(trace)

    cost = float(np.einsum("ti,ij,tj->", dx, Q, dx)
                 + np.einsum("ti,ij,tj->", du, R, du))
    st = np.sort(trace.solver_time)
    return MetricsReport(
        overshoot_z=overshoot(0), overshoot_y=overshoot(1),
        settling_steps=int(settling), rise_steps=int(rise), cost=cost,
        solver_median=float(np.median(st)),
        solver_p95=float(st[min(len(st) - 1, int(np.ceil(0.95 * len(st))) - 1)]),
        solver_max=float(st[-1]))


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonReport:
    names: List[str]
    traces: List[Optional[ClosedLoopTrace]]
    reports: List[Optional[MetricsReport]]
    errors: List[Optional[str]]

    def table_csv(self) -> str:
        cols = ["name", "overshoot_z", "overshoot_y", "settling_steps",
                "rise_steps", "cost", "solver_median", "solver_p95",
                "solver_max", "error"]
        lines = [",".join(cols)]
        for name, rep, err in zip(self.names, self.reports, self.errors):
            if rep is None:
                lines.append("%s,,,,,,,,,%s" % (name, err or ""))
            else:
                d = rep.as_dict()
                lines.append(name + "," + ",".join(
                    "%.17g" % d[k] if isinstance(d[k], float) else "%d" % d[k]
                    for k in cols[1:-1]) + ",")
        return "\n".join(lines) + "\n"

    def aligned_csv(self) -> str:
        """Per-step mass flow, pressure rise and solver time per scenario."""
        ok = [(n, tr) for n, tr in zip(self.names, self.traces)
              if tr is not None]
        if not ok:
            return "t\n"
        T = min(len(tr) for _, tr in ok)
        header = ["t"]
        for name, _ in ok:
            header += ["%s_z" % name, "%s_y" % name, "%s_solver" % name]
        lines = [",".join(header)]
        for t in range(T):
            row = [str(t)]
            for _, tr in ok:
                row += ["%.17g" % tr.x[t, 0], "%.17g" % tr.x[t, 1],
                        "%.17g" % tr.solver_time[t]]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def compare(scenarios, names=None, band: float = 0.02) -> ComparisonReport:
    """Run several scenarios side by side; per-scenario errors don't abort.

    All scenarios must share the plant seed and the initial state so the
    traces are comparable step for step.
    """
    scenarios = list(scenarios)
    if names is None:
        names = [getattr(s, "name", "scenario%d" % i)
                 for i, s in enumerate(scenarios)]
    x0s = [tuple(np.asarray(s.run.x0, dtype=float)) for s in scenarios]
    seeds = [s.schedule.seed for s in scenarios]
    if len(set(x0s)) > 1 or len(set(seeds)) > 1:
        raise ValueError("scenarios must share x0 and seed")
    traces, reports, errors = [], [], []
    for s in scenarios:
        try:
            tr = run_closed_loop(s)
            rep = metrics(tr, np.diag(s.controller.q_diag),
                          np.array([[s.controller.r]]), band=band)
            traces.append(tr)
            reports.append(rep)
            errors.append(None)
        except Exception as exc:  # propagate per scenario, keep going
            traces.append(None)
            reports.append(None)
            errors.append("%s: %s" % (type(exc).__name__, exc))
    return ComparisonReport(names=list(names), traces=traces,
                            reports=reports, errors=errors)
