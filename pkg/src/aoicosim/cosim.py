"""Closed-loop co-simulation of the scheduled network and the platoon controllers.

Order within step k: the network schedules and forecasts from a_k; the
controllers solve with neighbor data of age a_k and publish step-k messages;
the scheduled broadcast is realized (giving a_{k+1}); plants advance.
"""
from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import ChannelModel, LinkChain, Outage
from .dmpc.controller import (ReferenceTracker, RobustController, bootstrap_message)
from .dmpc.model import SubsystemModel
from .dmpc.terminal import TerminalError, assumption_status, verify_terminal
from .scheduler import NetworkController, step_aoi, weighted_pairs


class ScenarioError(ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


@dataclass
class SubsystemSpec:
    A: np.ndarray
    B: np.ndarray
    x0: np.ndarray
    u_bound: float
    neighbor: int | None = None  # index of the predecessor, None for the leader
    gain: np.ndarray | None = None
    halfwidth: float = 0.0  # bootstrap / published box half-width


@dataclass
class ScenarioConfig:
    subsystems: list
    weights: np.ndarray
    chain_q: np.ndarray  # states x links
    chain_T: np.ndarray
    links: list  # (sender, receiver) per chain column
    chain_init: int = 0
    H: int = 8
    N: int = 8
    abar: int = 4
    steps: int = 80
    dt: float = 0.3
    Q: np.ndarray = field(default_factory=lambda: np.diag([5.0, 1.0]))
    R: float = 0.1
    ref_x0: np.ndarray = field(default_factory=lambda: np.array([0.0, 5.0]))
    ref_u: float = 1.0
    u_init: float = 1.0
    gap_bounds: tuple = (0.0, 200.0)
    mode: str = "forecast"  # forecast | worstcase
    network_mode: str = "robust"  # robust | stochastic
    tau: float = 0.1
    strategy: str = "commit"
    seed: int = 0
    setpoints: list = field(default_factory=list)  # (k, offset behind reference)
    outages: list = field(default_factory=list)  # (sender, receiver, start, length)
    terminal_prefix: int = 60
    terminal_cone_fraction: float = 0.1
    leader_horizon: int = 16  # internal tracking horizon of the leader
    terminal_set: str = "braking"  # braking | lifted
    neighbor_tail: str = "global"  # box on neighbor steps beyond its plan: global | hold

    def __post_init__(self):
        n = len(self.subsystems)
        if n == 0:
            raise ScenarioError("missing required key: subsystems", "subsystems")
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (n, n):
            raise ScenarioError(f"weights must be {n}x{n}", "weights")
        if self.H < self.abar:
            raise ScenarioError("horizon must not be shorter than the maximal AoI", "H")
        if self.mode not in ("forecast", "worstcase"):
            raise ScenarioError(f"unknown mode {self.mode!r}", "mode")
        if self.subsystems[0].neighbor is not None:
            raise ScenarioError("the first subsystem must be the leader", "neighbor")


@dataclass
class TraceRecord:
    k: int
    aoi: dict  # (receiver, sender) -> a_k
    forecast: dict  # (receiver, sender) -> a_{k|k-1}
    sched: int  # broadcasting agent (1-based), 0 if idle
    x: np.ndarray  # n x 2
    u: np.ndarray
    span: float
    status: dict  # follower index -> QP status
    value: dict  # follower index -> optimal value
    event: str = ""


@dataclass
class RunResult:
    config: ScenarioConfig
    trace: list
    forecast_violations: int = 0
    refinement_violations: int = 0
    infeasible: int = 0
    constraint_violations: int = 0
    envelope_violations: int = 0
    runtime: float = 0.0
    details: dict = field(default_factory=dict)

    def span_after(self, k0: int) -> float:
        return max(r.span for r in self.trace if r.k >= k0)

    def max_aoi(self) -> float:
        return max(max(r.aoi.values()) for r in self.trace)


def _channel(cfg: ScenarioConfig, seed: int) -> ChannelModel:
    chain = LinkChain(np.array(cfg.chain_q, dtype=float), np.array(cfg.chain_T, dtype=float),
                      cfg.chain_init)
    links = {tuple(lk): (0, c) for c, lk in enumerate(cfg.links)}
    outages = [Outage((s, r), start, length) for s, r, start, length in cfg.outages]
    return ChannelModel([chain], links, outages, seed=seed)


def build_controllers(cfg: ScenarioConfig):
    subs = cfg.subsystems
    models = [SubsystemModel(s.A, s.B, s.u_bound) for s in subs]
    ref_model = SubsystemModel(subs[0].A, subs[0].B, np.inf)
    ctrls = [ReferenceTracker(0, models[0], ref_model, cfg.H, cfg.Q, cfg.R,
                              subs[0].halfwidth, cfg.u_init, cfg.ref_x0, cfg.ref_u,
                              cfg.leader_horizon)]
    for i, s in enumerate(subs[1:], start=1):
        j = s.neighbor
        ctrls.append(RobustController(i, models[i], j, models[j], cfg.H, cfg.abar, cfg.Q,
                                      cfg.R, s.gain, cfg.u_init, s.halfwidth,
                                      cfg.gap_bounds, cfg.mode, cfg.terminal_prefix,
                                      cfg.terminal_cone_fraction, cfg.terminal_set,
                                      cfg.neighbor_tail))
    return models, ctrls


def verify_controllers(ctrls) -> dict:
    """Terminal assumption status per follower index."""
    out = {}
    for c in ctrls[1:]:
        info = c.terminal.info  # synthesis is cached, so are the checks
        if "checks" not in info:
            info["checks"] = verify_terminal(c.terminal)
        out[c.index] = assumption_status(info["checks"])
    return out


def run_scenario(cfg: ScenarioConfig, seed: int | None = None) -> RunResult:
    t0 = time.perf_counter()
    seed = cfg.seed if seed is None else seed
    n = len(cfg.subsystems)
    models, ctrls = build_controllers(cfg)
    for i, status in verify_controllers(ctrls).items():
        bad = [name for name, (ok, _) in status.items() if not ok]
        if bad:
            raise TerminalError(f"subsystem {i + 1}: terminal check failed: {', '.join(bad)}")
    channel = _channel(cfg, seed)
    net = NetworkController(channel, cfg.weights, cfg.N, cfg.network_mode, cfg.tau,
                            cfg.strategy)
    pairs = [(i, j) for i, j, _ in weighted_pairs(cfg.weights)]

    x = [np.asarray(s.x0, dtype=float).copy() for s in cfg.subsystems]
    data = {}
    for i, s in enumerate(cfg.subsystems):
        if s.neighbor is not None:
            j = s.neighbor
            data[i] = bootstrap_message(j, models[j], x[j], cfg.u_init,
                                        cfg.subsystems[j].halfwidth, cfg.H)
    a = np.ones((n, n))
    setpoints = dict(cfg.setpoints)
    outage_starts = {start for _, _, start, _ in cfg.outages}

    trace, forecasts = [], []
    prev_fc = {p: a[p] for p in pairs}
    published = {i: [] for i in range(n)}  # messages per sender
    infeasible = 0
    env_viol = 0
    applied = np.zeros((cfg.steps, n))
    qp_data = {i: [] for i in range(1, n)}  # (x0, U1) per step, for value checks

    for k in range(cfg.steps):
        events = []
        if k in setpoints:
            ctrls[0].set_offset(setpoints[k])
            events.append("setpoint")
        if k in outage_starts:
            events.append("outage")
        vsched, fc = net.step(k, a)
        forecasts.append(fc)

        u = np.zeros(n)
        status, value = {}, {}
        msgs = {}
        uk, msgs[0], info = ctrls[0].compute(k, x[0])
        u[0] = uk
        for i in range(1, n):
            msg = data[i]
            if k - msg.stamp != int(a[i, msg.sender]):
                raise ScenarioError("neighbor data age disagrees with the AoI")
            fc_i = fc.get((i, msg.sender))
            uk, msgs[i], info = ctrls[i].compute(k, x[i], msg, fc_i)
            u[i] = uk
            lr = ctrls[i].last_result
            qp_data[i].append((lr[1].copy(), lr[2].copy()))
            status[i] = info.status
            value[i] = info.objective
            if info.status != "optimal":
                infeasible += 1
        for i in range(n):
            published[i].append(msgs[i])
            applied[k, i] = u[i]

        span = float(x[0][0] - x[-1][0])
        sched = int(np.argmax(vsched)) + 1 if vsched.any() else 0
        trace.append(TraceRecord(k, {p: float(a[p]) for p in pairs},
                                 {p: float(prev_fc[p]) for p in pairs}, sched,
                                 np.array(x), u.copy(), span, status, value,
                                 ";".join(events)))

        # transmissions
        result = channel.draw(k, {sched - 1} if sched else set())
        p = np.zeros((n, n))
        for (snd, rcv), ok in result.items():
            p[snd, rcv] = float(ok)
            if ok:
                for i, s in enumerate(cfg.subsystems):
                    if i == rcv and s.neighbor == snd:
                        data[i] = msgs[snd]
        a = step_aoi(a, vsched, p)
        prev_fc = {pr: fc[pr][0] for pr in pairs}

        for i in range(n):
            x[i] = models[i].step(x[i], u[i])
        ctrls[0].advance_reference()

    # soundness of published intervals: every applied input respects every
    # interval published for its step
    for i in range(n):
        for msg in published[i]:
            for t in range(msg.plan.size):
                m = msg.stamp + t
                if m < cfg.steps:
                    ua = applied[m, i]
                    if ua < msg.lo[t] - 1e-7 or ua > msg.hi[t] + 1e-7:
                        env_viol += 1

    res = RunResult(cfg, trace, infeasible=infeasible, envelope_violations=env_viol,
                    details={"qp": qp_data, "controllers": ctrls})
    res.forecast_violations, res.refinement_violations = _forecast_checks(trace, forecasts,
                                                                          pairs, cfg.steps)
    res.constraint_violations = _constraint_checks(cfg, trace, models)
    res.runtime = time.perf_counter() - t0
    return res


def _forecast_checks(trace, forecasts, pairs, steps):
    viol = refine = 0
    for k, fc in enumerate(forecasts):
        for p in pairs:
            f = fc[p]
            for l in range(f.size):
                t = k + l + 1
                if t < steps and trace[t].aoi[p] > f[l] + 1e-12:
                    viol += 1
                for r in range(1, l + 1):
                    if k + r < steps and forecasts[k + r][p][l - r] > f[l] + 1e-12:
                        refine += 1
    return viol, refine


def _constraint_checks(cfg, trace, models, tol=1e-7):
    lo, hi = cfg.gap_bounds
    bad = 0
    for r in trace:
        for i, s in enumerate(cfg.subsystems):
            if abs(r.u[i]) > models[i].u_bound + tol:
                bad += 1
            if s.neighbor is not None:
                gap = r.x[s.neighbor][0] - r.x[i][0]
                if r.k > 0 and (gap < lo - tol or gap > hi + tol):
                    bad += 1
    return bad


@dataclass
class _AoiRecord:
    k: int
    aoi: dict


def run_network(cfg: ScenarioConfig, seed: int | None = None, steps: int | None = None):
    """Network layer only: schedule, forecast, transmit, age.

    Returns (trace, forecasts, forecast_violations, refinement_violations); the
    trace holds AoI records only.
    """
    seed = cfg.seed if seed is None else seed
    steps = cfg.steps if steps is None else steps
    n = len(cfg.subsystems)
    channel = _channel(cfg, seed)
    net = NetworkController(channel, cfg.weights, cfg.N, cfg.network_mode, cfg.tau,
                            cfg.strategy)
    pairs = [(i, j) for i, j, _ in weighted_pairs(cfg.weights)]
    a = np.ones((n, n))
    trace, forecasts = [], []
    for k in range(steps):
        vsched, fc = net.step(k, a)
        forecasts.append(fc)
        trace.append(_AoiRecord(k, {p: float(a[p]) for p in pairs}))
        sched = {int(np.argmax(vsched))} if vsched.any() else set()
        p = np.zeros((n, n))
        for (snd, rcv), ok in channel.draw(k, sched).items():
            p[snd, rcv] = float(ok)
        a = step_aoi(a, vsched, p)
    viol, refine = _forecast_checks(trace, forecasts, pairs, steps)
    return trace, forecasts, viol, refine


def nominal_config(**overrides) -> ScenarioConfig:
    """Two vehicles on a perfect channel with a leader that never deviates.

    The leader publishes zero-width intervals and coasts, the follower uses
    the lifted terminal set and a held neighbor tail, so every prediction is
    exact and the value function decrease can be checked step by step.
    """
    base = platoon_config()
    subs = [replace(base.subsystems[0], x0=np.array([0.0, 5.0]), halfwidth=0.0),
            replace(base.subsystems[1], x0=np.array([-12.0, 6.0]))]
    W = np.array([[0.0, 0.0], [1.0, 0.0]])
    cfg = ScenarioConfig(subs, W, np.ones((1, 1)), np.ones((1, 1)), [(0, 1)], ref_u=0.0,
                         u_init=0.0, steps=40, terminal_set="lifted", neighbor_tail="hold")
    return replace(cfg, **overrides) if overrides else cfg


def value_decrease_margins(res: RunResult, i: int = 1) -> np.ndarray:
    """V_{k+1} - V_k + stage_k - terminal increment, per step (should be <= 0).

    The terminal increment is the cost of the appended neighbor input: its
    stage weight plus its terminal-cost image.
    """
    c = res.details["controllers"][i]
    P, Bx = c.terminal.P, c.terminal.B_xi[:, 0]
    qp = res.details["qp"][i]
    out = []
    for k in range(len(res.trace) - 1):
        x0, U1 = qp[k]
        w = np.array([res.trace[k].u[i], U1.ravel()[0]])
        stage = x0 @ c.Qx @ x0 + w @ c.Qu @ w
        un = qp[k + 1][1].ravel()[-1]
        extra = c.Qu[1, 1] * un ** 2 + (Bx * un) @ P @ (Bx * un)
        out.append(res.trace[k + 1].value[i] - res.trace[k].value[i] + stage - extra)
    return np.array(out)


def _first_event(cfg: ScenarioConfig) -> int:
    steps = [k for k, _ in cfg.setpoints] + [start for _, _, start, _ in cfg.outages]
    steps = [k for k in steps if k < cfg.steps]
    return min(steps) if steps else 0


def trace_metrics(res: RunResult, event_step: int | None = None) -> dict:
    """Metrics of one run; the span maximum is taken from the first event on."""
    cfg = res.config
    k0 = _first_event(cfg) if event_step is None else event_step
    ages = [int(v) for r in res.trace for v in r.aoi.values()]
    u = np.array([r.u for r in res.trace])
    gaps = [r.x[s.neighbor][0] - r.x[i][0] for r in res.trace if r.k > 0
            for i, s in enumerate(cfg.subsystems) if s.neighbor is not None]
    lo, hi = cfg.gap_bounds
    return {
        "span_max": res.span_after(k0),
        "aoi_max": max(ages),
        "aoi_hist": dict(sorted(Counter(ages).items())),
        "u_max": np.abs(u).max(axis=0),
        "gap_min": float(min(gaps)) if gaps else np.nan,
        "gap_violations": int(sum(g < lo - 1e-7 or g > hi + 1e-7 for g in gaps)),
        "infeasible": res.infeasible,
        "constraint_violations": res.constraint_violations,
        "envelope_violations": res.envelope_violations,
        "forecast_violations": res.forecast_violations,
        "refinement_violations": res.refinement_violations,
        "runtime": res.runtime,
    }


def compute_metrics(results, event_step: int | None = None) -> dict:
    """Aggregate :func:`trace_metrics` over runs (a single run is accepted)."""
    if isinstance(results, RunResult):
        results = [results]
    per = [trace_metrics(r, event_step) for r in results]
    spans = np.array([m["span_max"] for m in per])
    out = {
        "runs": len(per),
        "span_mean": float(spans.mean()),
        "span_std": float(spans.std()),
        "spans": spans,
        "aoi_max": max(m["aoi_max"] for m in per),
        "aoi_mean": float(np.mean([v for r in results for rec in r.trace
                                   for v in rec.aoi.values()])),
        "runtime": float(sum(m["runtime"] for m in per)),
    }
    for key in ("infeasible", "constraint_violations", "envelope_violations",
                "forecast_violations", "refinement_violations", "gap_violations"):
        out[key] = int(sum(m[key] for m in per))
    return out


def run_monte_carlo(cfg: ScenarioConfig, seeds, workers: int = 1) -> dict:
    """Run one scenario per seed (an int means seeds 0..n-1) and aggregate.

    Seeds are independent; with ``workers > 1`` they run in separate processes.
    """
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if not seeds:
        raise ScenarioError("at least one seed is required", "seeds")
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_seed, [(cfg, s) for s in seeds]))
    else:
        results = [run_scenario(cfg, seed=s) for s in seeds]
    summary = compute_metrics(results)
    summary["results"] = results
    summary["seeds"] = seeds
    return summary


def _run_seed(args):
    res = run_scenario(*args)
    res.details.pop("controllers", None)  # not picklable cheaply
    return res


def platoon_config(**overrides) -> ScenarioConfig:
    """Three-vehicle platoon on the eight-state periodic channel."""
    A = np.array([[1.0, 0.3], [0.0, 1.0]])
    B = np.array([[0.045], [0.3]])
    subs = [
        SubsystemSpec(A, B, np.array([-13.0, 5.0]), 1.98, None, None, 0.594),
        SubsystemSpec(A, B, np.array([-20.0, 5.0]), 3.0, 0,
                      np.array([[-0.03, -0.54, 0.03, 0.54]]), 0.9),
        SubsystemSpec(A, B, np.array([-25.0, 5.0]), 5.0, 1,
                      np.array([[-0.06, -0.6, 0.06, 0.6]]), 1.5),
    ]
    W = np.zeros((3, 3))
    W[1, 0] = W[2, 1] = 1.0
    q = np.array([(1, 1), (.85, .85), (.85, 1), (.85, .85), (1, .85), (.85, .85),
                  (1, 1), (1, 1)], dtype=float)
    T = np.roll(np.eye(8), 1, axis=1)
    cfg = ScenarioConfig(subs, W, q, T, [(0, 1), (1, 2)], setpoints=[(20, 5.0)],
                         outages=[(1, 2, 59, 3)])
    return replace(cfg, **overrides) if overrides else cfg
