"""Local controllers exchanging plans and input envelopes.

A message stamped ``t`` carries the sender's state at ``t``, its nominal
input plan for steps t..t+H-1 and an interval per step that its applied
inputs are guaranteed to respect. The first interval is degenerate because
the first planned input is the one applied at ``t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .model import SubsystemModel, build_augmented_model, estimate_neighbor_state
from .policy import (PolicyQp, build_feedback_mask, shift_input_constraint,
                     shift_policy)
from .terminal import synthesize_terminal


@dataclass
class Message:
    sender: int
    stamp: int
    state: np.ndarray
    plan: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def covered(self, m: int) -> bool:
        return 0 <= m - self.stamp < self.plan.size


def bootstrap_message(sender: int, model: SubsystemModel, x0, u_init: float,
                      halfwidth: float, H: int) -> Message:
    """Message stamped -1 consistent with state ``x0`` at step 0."""
    x_prev = np.linalg.solve(model.A, np.asarray(x0, dtype=float) - model.B[:, 0] * u_init)
    plan = np.full(H, float(u_init))
    lo = np.clip(plan - halfwidth, -model.u_bound, model.u_bound)
    hi = np.clip(plan + halfwidth, -model.u_bound, model.u_bound)
    lo[0] = hi[0] = plan[0]
    return Message(sender, -1, x_prev, plan, lo, hi)


def bootstrap_intervals(model: SubsystemModel, u_init: float, halfwidth: float, H: int):
    """Own input intervals at step 0 matching :func:`bootstrap_message`."""
    lo = np.full(H, max(u_init - halfwidth, -model.u_bound))
    hi = np.full(H, min(u_init + halfwidth, model.u_bound))
    lo[-1], hi[-1] = -model.u_bound, model.u_bound
    return lo, hi


@dataclass
class StepInfo:
    status: str
    u: float
    objective: float = np.nan
    n_vars: int = 0
    n_cons: int = 0
    fallback: bool = False
    gamma_hi: np.ndarray | None = None
    gamma_lo: np.ndarray | None = None
    mask_entries: int = 0


class _Base:
    def _shift_publish(self, k, x, v, lo, hi):
        msg = Message(self.index, k, np.asarray(x, dtype=float).copy(), v.copy(),
                      lo.copy(), hi.copy())
        # envelope relative to the plan; lo, hi already respect the old intervals
        self.lo_next, self.hi_next = shift_input_constraint(v, hi - v, v - lo,
                                                            self.model.u_bound, lo, hi)
        self.last_msg = msg
        return msg

    def _fallback(self, k, x):
        """Reuse the previous commitment: shifted plan, shifted intervals."""
        if self.last_msg is None:  # bootstrap plan
            v = np.full(self.H, self.u_init)
        else:
            # deviations realized since the last solve are not tracked: zero
            plan = self.last_msg.plan
            v = shift_policy(plan, np.zeros((plan.size, 0)), [], {}, k, plan[-1])
        lo, hi = self.lo_next.copy(), self.hi_next.copy()
        v = np.clip(v, lo, hi)
        lo[0] = hi[0] = v[0]
        return self._shift_publish(k, x, v, lo, hi), v[0]


class ReferenceTracker(_Base):
    """Leader controller: tracks a reference trajectory with a position offset.

    It solves a nominal QP within its own input intervals. Each new horizon
    slot is published with a box of ``halfwidth`` around its nominal value;
    older slots keep the interval they were published with.
    """

    def __init__(self, index, model: SubsystemModel, ref_model: SubsystemModel, H,
                 Q, R, halfwidth, u_init, x_ref0, u_ref, plan_horizon=None):
        self.index = index
        self.model = model
        self.H = H
        self.Hp = H if plan_horizon is None else max(int(plan_horizon), H)
        self.halfwidth = halfwidth
        self.aug = build_augmented_model(model, [ref_model])
        Qx = np.kron(np.array([[1.0, -1.0], [-1.0, 1.0]]), Q)
        Qu = R * np.array([[1.0, -1.0], [-1.0, 1.0]])
        Pe = sla.solve_discrete_are(model.A, model.B, Q, np.atleast_2d(R))
        Pw = np.kron(np.array([[1.0, -1.0], [-1.0, 1.0]]), Pe)
        self.qp = PolicyQp(self.aug, self.Hp, Qx, Qu, coupled=(), window=1, P_window=Pw)
        self.ref_model = ref_model
        self.x_ref = np.asarray(x_ref0, dtype=float)
        self.u_ref = float(u_ref)
        self.offset = 0.0
        self.u_init = float(u_init)
        self.lo_next, self.hi_next = bootstrap_intervals(model, u_init, halfwidth, H)
        self.last_msg = None

    def set_offset(self, offset: float):
        self.offset = float(offset)

    def reference_at(self, k):
        return self.x_ref

    def compute(self, k, x):
        shift = np.zeros(self.model.nx)
        shift[0] = self.offset
        x0 = np.concatenate([x, self.x_ref - shift])
        U1 = np.full(self.Hp, self.u_ref)
        tail = np.full(self.Hp - self.H, self.model.u_bound)
        res = self.qp.solve(x0, U1, [], np.zeros(0), np.zeros(0),
                            np.zeros((self.Hp, 0), dtype=bool),
                            np.concatenate([self.lo_next, -tail]),
                            np.concatenate([self.hi_next, tail]))
        if not res.ok:
            msg, u = self._fallback(k, x)
            return u, msg, StepInfo(res.status, u, fallback=True)
        v = np.clip(res.v[:self.H], self.lo_next, self.hi_next)
        lo = self.lo_next.copy()
        hi = self.hi_next.copy()
        lo[0] = hi[0] = v[0]
        lo[-1] = max(v[-1] - self.halfwidth, -self.model.u_bound)
        hi[-1] = min(v[-1] + self.halfwidth, self.model.u_bound)
        msg = self._shift_publish(k, x, v, lo, hi)
        return v[0], msg, StepInfo("optimal", float(v[0]), res.objective,
                                   res.n_vars, res.n_cons)

    def advance_reference(self):
        self.x_ref = self.ref_model.step(self.x_ref, self.u_ref)


class RobustController(_Base):
    """Follower controller with an affine disturbance-feedback policy."""

    def __init__(self, index, model: SubsystemModel, nbr_index, nbr_model: SubsystemModel,
                 H, abar, Q, R, gain, u_init, halfwidth, gap_bounds=(0.0, 200.0),
                 mode="forecast", prefix=40, cone_fraction=0.1, terminal_set="braking",
                 neighbor_tail="global"):
        self.index = index
        self.model = model
        self.nbr = nbr_index
        self.nbr_model = nbr_model
        self.H = H
        self.abar = abar
        self.mode = mode
        self.halfwidth = halfwidth
        if terminal_set not in ("braking", "lifted"):
            raise ValueError(f"unknown terminal set {terminal_set!r}")
        if neighbor_tail not in ("global", "hold"):
            raise ValueError(f"unknown neighbor tail {neighbor_tail!r}")
        self.neighbor_tail = neighbor_tail
        self.aug = build_augmented_model(model, [nbr_model])
        nx = model.nx
        Qx = np.kron(np.array([[1.0, -1.0], [-1.0, 1.0]]), Q)
        Qu = R * np.array([[1.0, -1.0], [-1.0, 1.0]])
        self.Qx, self.Qu = Qx, Qu
        self.terminal = synthesize_terminal(model.A, model.B, np.atleast_2d(gain), Qx, Qu,
                                            abar, model.u_bound, nbr_model.u_bound,
                                            gap_bounds, prefix, cone_fraction)
        term = self.terminal
        gap = np.zeros(2 * nx)
        gap[0], gap[nx] = -1.0, 1.0  # x_nbr position - x_own position
        if terminal_set == "braking":
            # braking-safe set on the newest error block
            Fs = np.zeros((term.X_safe.C.shape[0], abar * 2 * nx))
            Fs[:, -2 * nx:] = term.X_safe.C @ np.hstack([-np.eye(nx), np.eye(nx)])
            fs = term.X_safe.b
        else:
            # lifted set over the last abar augmented states
            Fs, fs = term.X_abs.C, term.X_abs.b
        self.qp = PolicyQp(self.aug, H, Qx, Qu, coupled=[(gap, *gap_bounds)],
                           window=abar, P_window=term.P, F_window=Fs, f_window=fs)
        self.u_init = float(u_init)
        self.lo_next, self.hi_next = bootstrap_intervals(model, u_init, halfwidth, H)
        self.last_msg = None
        self.last_result = None

    def neighbor_data(self, k, msg: Message):
        """Estimate, nominal neighbor inputs and deviation boxes."""
        a = k - msg.stamp
        H = self.H
        x_hat = estimate_neighbor_state(self.nbr_model, msg.state, msg.plan, a)
        held = msg.plan[-1]
        ub = self.nbr_model.u_bound
        U1 = np.array([msg.plan[k + l - msg.stamp] if msg.covered(k + l) else held
                       for l in range(H)])
        cols, center, half = [], [], []
        for q in range(1 - a, H):
            m = k + q
            if msg.covered(m):
                i = m - msg.stamp
                lo, hi = msg.lo[i] - msg.plan[i], msg.hi[i] - msg.plan[i]
            elif self.neighbor_tail == "hold":
                lo = hi = 0.0
            else:
                lo, hi = -ub - held, ub - held
            cols.append((0, q))
            center.append(0.5 * (lo + hi))
            half.append(0.5 * (hi - lo))
        return x_hat, U1, cols, np.array(center), np.array(half)

    def compute(self, k, x, msg: Message, forecasts=None):
        a = k - msg.stamp
        x_hat, U1, cols, center, half = self.neighbor_data(k, msg)
        mask, _ = build_feedback_mask(a, forecasts, self.H, self.abar, self.mode)
        x0 = np.concatenate([x, x_hat])
        res = self.qp.solve(x0, U1, cols, center, half, mask, self.lo_next, self.hi_next)
        self.last_result = (res, x0, U1, cols, center, half, mask)
        if not res.ok:
            out, u = self._fallback(k, x)
            return u, out, StepInfo(res.status, float(u), fallback=True,
                                    mask_entries=int(mask.sum()))
        v = res.v
        lo = np.maximum(v - res.gamma_lo, self.lo_next)
        hi = np.minimum(v + res.gamma_hi, self.hi_next)
        lo[0] = hi[0] = v[0]
        out = self._shift_publish(k, x, v, lo, hi)
        return float(v[0]), out, StepInfo("optimal", float(v[0]), res.objective,
                                          res.n_vars, res.n_cons, False,
                                          res.gamma_hi, res.gamma_lo, int(mask.sum()))
