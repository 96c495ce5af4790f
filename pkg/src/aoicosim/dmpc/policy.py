"""Affine disturbance-feedback policies and their robust QP.

Own inputs over the horizon are u = v + K d, where d stacks the deviations of
the neighbor inputs from their communicated nominal values. Deviations are
boxed (center c, half-width h). Constraint tightening uses the exact support
of a box, sum_m (map_m c_m + |map_m| h_m), with epigraph variables for the
absolute values whenever ``map_m`` depends on K.

Scalar inputs are assumed for the own subsystem and for each neighbor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..numkernel import QpProblem, QpSolution, solve_qp


PIN_TOL = 1e-12


class PolicyError(ValueError):
    pass


def build_feedback_mask(a_now: int, forecasts, H: int, abar: int,
                        mode: str = "forecast"):
    """Free entries of K for one neighbor.

    Columns are deviation offsets q = m - k in [1 - a_now, H - 1]; row l is
    the input at k + l. Entry (l, q) is free iff q <= l - a_{k+l|k}, where
    a_{k|k} = a_now and later ages are the forecasts (``mode='forecast'``) or
    ``abar`` (``mode='worstcase'``). The first row is therefore always zero.
    Returns (mask, offsets).
    """
    if a_now < 1:
        raise PolicyError("AoI must be at least 1")
    if mode not in ("forecast", "worstcase"):
        raise PolicyError(f"unknown mode {mode!r}")
    offsets = np.arange(1 - a_now, H)
    ages = np.empty(H)
    ages[0] = a_now
    fc = np.asarray(forecasts if forecasts is not None else [], dtype=float)
    for l in range(1, H):
        if mode == "forecast" and l - 1 < fc.size:
            ages[l] = fc[l - 1]
        else:
            ages[l] = abar
    mask = offsets[None, :] <= (np.arange(H) - ages)[:, None]
    return mask, offsets


def compute_envelope(K, center, half):
    """Tightest per-step bounds on K d over the box center +- half.

    Returns (gamma_hi, gamma_lo) with -gamma_lo <= (K d)_l <= gamma_hi.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    center = np.asarray(center, dtype=float)
    half = np.asarray(half, dtype=float)
    spread = np.abs(K) @ half
    mid = K @ center
    return mid + spread, -mid + spread


def shift_input_constraint(v, gamma_hi, gamma_lo, u_bound: float, lo=None, hi=None):
    """Input intervals for the next step from a published plan and envelope.

    Step l+1 keeps [v_l - gamma_lo_l, v_l + gamma_hi_l] (intersected with the
    previous intervals when given); the new last step gets the global bound.
    """
    v = np.asarray(v, dtype=float)
    cur_lo = v - np.asarray(gamma_lo, dtype=float)
    cur_hi = v + np.asarray(gamma_hi, dtype=float)
    if lo is not None:
        cur_lo = np.maximum(cur_lo, lo)
    if hi is not None:
        cur_hi = np.minimum(cur_hi, hi)
    return (np.append(cur_lo[1:], -u_bound), np.append(cur_hi[1:], u_bound))


def shift_policy(v, K, cols, deviations, k: int, u_terminal: float):
    """Candidate input trajectory for step k+1.

    ``cols`` are the (neighbor, offset) deviation columns of the policy solved
    at step k and ``deviations`` maps absolute neighbor steps to realized
    deviations known at k+1. Unknown deviations count as zero.
    """
    v = np.asarray(v, dtype=float)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    d = np.array([deviations.get(k + q, 0.0) for _, q in cols])
    u = v + (K @ d if d.size else 0.0)
    return np.append(u[1:], u_terminal)


@dataclass
class PolicyResult:
    status: str
    v: np.ndarray | None = None
    K: np.ndarray | None = None
    gamma_hi: np.ndarray | None = None
    gamma_lo: np.ndarray | None = None
    objective: float = np.nan
    qp: QpSolution | None = None
    n_vars: int = 0
    n_cons: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


class PolicyQp:
    """Precomputed robust QP for one subsystem.

    Parameters
    ----------
    aug : AugmentedModel
    H : int
        Prediction horizon.
    Qx, Qu : ndarray
        Stage weights on the augmented state and on [own input; neighbor inputs].
    coupled : list of (row, lo, hi)
        Linear constraints lo <= row . x_aug <= hi imposed on x_1 .. x_H.
    P_window, F_window, f_window : ndarray or None
        Terminal weight and terminal set rows on the stacked window of the
        last ``window`` augmented states.
    """

    def __init__(self, aug, H, Qx, Qu, coupled=(), window=1, P_window=None,
                 F_window=None, f_window=None, max_age=None):
        self.aug = aug
        self.H = H
        nx = aug.nx
        self.nx = nx
        if aug.B.shape[1] != 1:
            raise PolicyError("own input must be scalar")
        self.nn = aug.B1.shape[1]
        self.window = window
        self.max_age = H if max_age is None else max_age
        A = aug.A
        npow = 2 * H + self.max_age + 2
        self.Apow = [np.eye(nx)]
        for _ in range(npow):
            self.Apow.append(A @ self.Apow[-1])

        # x_l for l = 1..H stacked: X = Phi x0 + Gam v + Gam1 U1 + ...
        Phi = np.vstack([self.Apow[l] for l in range(1, H + 1)])
        Gam = np.zeros((H * nx, H))
        Gam1 = np.zeros((H * nx, H * self.nn))
        for l in range(1, H + 1):
            for n in range(l):
                Gam[(l - 1) * nx:l * nx, n] = (self.Apow[l - 1 - n] @ aug.B)[:, 0]
                Gam1[(l - 1) * nx:l * nx, n * self.nn:(n + 1) * self.nn] = \
                    self.Apow[l - 1 - n] @ aug.B1
        self.Phi, self.Gam, self.Gam1 = Phi, Gam, Gam1

        # constraint rows on (X, U)
        Rs, Ss, lo, hi, kinds = [], [], [], [], []
        for l in range(1, H + 1):
            for row, rlo, rhi in coupled:
                r = np.zeros(H * nx)
                r[(l - 1) * nx:l * nx] = row
                Rs.append(r)
                Ss.append(np.zeros(H))
                lo.append(rlo)
                hi.append(rhi)
                kinds.append("state")
        self.input_rows = []
        for l in range(H):
            s = np.zeros(H)
            s[l] = 1.0
            self.input_rows.append(len(Rs))
            Rs.append(np.zeros(H * nx))
            Ss.append(s)
            lo.append(-np.inf)
            hi.append(np.inf)
            kinds.append("input")
        Wsel = np.zeros((window * nx, H * nx))
        Wsel[:, (H - window) * nx:] = np.eye(window * nx)
        self.Wsel = Wsel
        if F_window is not None:
            for frow, fval in zip(F_window, f_window):
                Rs.append(frow @ Wsel)
                Ss.append(np.zeros(H))
                lo.append(-np.inf)
                hi.append(fval)
                kinds.append("terminal")
        self.R = np.array(Rs)
        self.S = np.array(Ss)
        self.lo0 = np.array(lo, dtype=float)
        self.hi0 = np.array(hi, dtype=float)
        self.kinds = kinds
        self.terminal_rows = np.array([i for i, kd in enumerate(kinds) if kd == "terminal"],
                                      dtype=int)
        self.input_rows = np.array(self.input_rows)
        self.G = self.R @ Gam + self.S
        self.RPhi = self.R @ Phi
        self.RGam1 = self.R @ Gam1
        self._C0_cache = {}

        # cost on v: 0.5 v'Hv v + (Lx x0 + LU u1)'v
        Qx = np.asarray(Qx, dtype=float)
        Qu = np.asarray(Qu, dtype=float)
        Qbig = np.kron(np.eye(H), Qx)
        Qbig[-nx:, -nx:] = 0.0  # x_H only enters through the terminal weight
        if P_window is not None:
            Qbig = Qbig + Wsel.T @ P_window @ Wsel
        self.Hv = 2 * (Gam.T @ Qbig @ Gam + Qu[0, 0] * np.eye(H))
        self.Lx = 2 * Gam.T @ Qbig @ Phi
        cross = np.kron(np.eye(H), Qu[0:1, 1:])  # H x H*nn
        self.LU = 2 * (Gam.T @ Qbig @ Gam1 + cross)
        self.Qbig, self.Qu, self.Qx = Qbig, Qu, Qx

    # -- helpers ----------------------------------------------------------
    def _gam2_rows(self, j, q):
        """R @ (effect of a unit deviation of neighbor j at offset q)."""
        key = (j, q)
        if key not in self._C0_cache:
            col = np.zeros(self.H * self.nx)
            b2 = self.aug.B2[:, j]
            for l in range(1, self.H + 1):
                if q <= l - 1:
                    col[(l - 1) * self.nx:l * self.nx] = self.Apow[l - 1 - q] @ b2
            self._C0_cache[key] = (self.R @ col, col)
        return self._C0_cache[key]

    def predict(self, x0, U1, v, K=None, d=None, cols=None):
        """Predicted states x_1..x_H (H x nx) and inputs for given deviations."""
        U1 = np.asarray(U1, dtype=float).reshape(self.H, self.nn)
        u = np.asarray(v, dtype=float).copy()
        X = self.Phi @ x0 + self.Gam1 @ U1.ravel()
        if d is not None:
            u = u + K @ d
            for dm, (j, q) in zip(d, cols):
                X = X + self._gam2_rows(j, q)[1] * dm
        X = X + self.Gam @ u
        return X.reshape(self.H, self.nx), u

    # -- assembly ---------------------------------------------------------
    def solve(self, x0, U1, cols, center, half, mask, u_lo, u_hi,
              terminal_cols=None) -> PolicyResult:
        """Solve the robust QP.

        cols : list of (neighbor index, offset) for each deviation column.
        center, half : deviation box per column.
        mask : (H, D) boolean free-entry pattern of K.
        u_lo, u_hi : own input interval per horizon step.
        terminal_cols : boolean per column, deviations the terminal rows are
            tightened against (default all).
        """
        H = self.H
        D = len(cols)
        center = np.asarray(center, dtype=float)
        half = np.asarray(half, dtype=float)
        mask = np.asarray(mask, dtype=bool).reshape(H, D)
        U1 = np.asarray(U1, dtype=float).reshape(H, self.nn)
        nR = self.R.shape[0]

        C0 = np.zeros((nR, D))
        for c, (j, q) in enumerate(cols):
            C0[:, c] = self._gam2_rows(j, q)[0]
        lo = self.lo0.copy()
        hi = self.hi0.copy()
        lo[self.input_rows] = u_lo
        hi[self.input_rows] = u_hi
        # a pinned input admits no feedback; its two bounds become one equality
        pinned = np.asarray(u_hi) - np.asarray(u_lo) <= PIN_TOL
        mask = mask & ~pinned[:, None]
        eq_rows = np.zeros(nR, dtype=bool)
        eq_rows[self.input_rows[pinned]] = True

        applies = np.ones((nR, D), dtype=bool)
        if terminal_cols is not None:
            applies[self.terminal_rows] = np.asarray(terminal_cols, dtype=bool)[None, :]
        C0 = C0 * applies
        nom = self.RPhi @ x0 + self.RGam1 @ U1.ravel() + C0 @ center
        fn, fc = np.nonzero(mask)  # free entries, row-major
        nK = fn.size
        G = self.G
        dep = (np.abs(G) @ mask.astype(float)) > 0  # rows x D
        dep &= (half > 0)[None, :] & applies
        ar, ac = np.nonzero(dep)
        nS = ar.size
        const_abs = (np.abs(C0) * half[None, :] * ~dep).sum(axis=1)
        nv = H + nK + nS

        # center coefficient of kappa_(n,col) in row r: G[r, n] * center[col]
        base = np.zeros((nR, nv))
        base[:, :H] = G
        base[:, H:H + nK] = G[:, fn] * center[fc][None, :] * applies[:, fc]
        Saux = np.zeros((nR, nS))
        Saux[ar, np.arange(nS)] = half[ac]
        base[:, H + nK:] = Saux

        blocks, rhs = [], []
        up = np.isfinite(hi) & ~eq_rows
        if up.any():
            blocks.append(base[up])
            rhs.append(hi[up] - nom[up] - const_abs[up])
        dn = np.isfinite(lo) & ~eq_rows
        if dn.any():
            neg = -base[dn]
            neg[:, H + nK:] = Saux[dn]
            blocks.append(neg)
            rhs.append(-lo[dn] + nom[dn] - const_abs[dn])
        if nS:
            # aux rows: +-(C0[r,c] + sum_n G[r,n] kappa_(n,c)) <= s_(r,c)
            M = np.zeros((nS, nv))
            Gk = G[ar[:, None], fn[None, :]] * (fc[None, :] == ac[:, None])
            M[:, H:H + nK] = Gk
            Sneg = np.zeros((nS, nv))
            Sneg[np.arange(nS), H + nK + np.arange(nS)] = -1.0
            blocks += [M + Sneg, -M + Sneg]
            c0 = C0[ar, ac]
            rhs += [-c0, c0]
        Cmat = sp.csr_matrix(np.vstack(blocks))
        bvec = np.concatenate(rhs)
        Emat = sp.csr_matrix(base[eq_rows])
        evec = 0.5 * (lo[eq_rows] + hi[eq_rows]) - nom[eq_rows]

        Hfull = np.zeros((nv, nv))
        Hfull[:H, :H] = self.Hv
        Hfull = sp.csr_matrix(Hfull)
        g = np.zeros(nv)
        g[:H] = self.Lx @ x0 + self.LU @ U1.ravel()
        prob = QpProblem(Hfull, g, Cmat, bvec, Emat, evec)
        sol = solve_qp(prob)
        res = PolicyResult(sol.status, qp=sol, n_vars=nv,
                           n_cons=Cmat.shape[0] + Emat.shape[0])
        if not sol.ok:
            return res
        z = sol.x
        v = z[:H].copy()
        K = np.zeros((H, D))
        K[fn, fc] = z[H:H + nK]
        res.v, res.K = v, K
        res.gamma_hi, res.gamma_lo = compute_envelope(K, center, half)
        res.objective = self.nominal_cost(x0, U1, v)
        return res

    def robust_rows(self, x0, U1, cols, center, half, v, K, terminal_cols=None):
        """Worst-case (max, min) of every constraint row over the deviation box
        for a fixed policy, with the row bounds: (upper, lower, lo, hi)."""
        D = len(cols)
        nR = self.R.shape[0]
        C0 = np.zeros((nR, D))
        for c, (j, q) in enumerate(cols):
            C0[:, c] = self._gam2_rows(j, q)[0]
        if terminal_cols is not None:
            C0[self.terminal_rows] *= np.asarray(terminal_cols, dtype=float)[None, :]
        U1 = np.asarray(U1, dtype=float).reshape(self.H, self.nn)
        M = C0 + self.G @ np.asarray(K, dtype=float).reshape(self.H, D)
        if terminal_cols is not None:
            M[self.terminal_rows] *= np.asarray(terminal_cols, dtype=float)[None, :]
        nom = self.RPhi @ x0 + self.RGam1 @ U1.ravel() + self.G @ v + M @ center
        spread = np.abs(M) @ half
        return nom + spread, nom - spread, self.lo0.copy(), self.hi0.copy()

    def nominal_cost(self, x0, U1, v):
        """Nominal objective value including constant terms."""
        X, u = self.predict(x0, U1, v)
        U1 = np.asarray(U1, dtype=float).reshape(self.H, self.nn)
        val = float(X.ravel() @ self.Qbig @ X.ravel() + x0 @ self.Qx @ x0)
        for l in range(self.H):
            w = np.concatenate([[u[l]], U1[l]])
            val += float(w @ self.Qu @ w)
        return val
