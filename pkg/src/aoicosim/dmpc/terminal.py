"""Terminal ingredients for the delayed terminal control law.

The lifted state stacks the last ``abar`` augmented states (oldest first) and
the terminal law acts on the oldest block. Because the augmented model
contains the neighbor's free double integrator, the lifted dynamics are not
Schur-stable in absolute coordinates; stability, the terminal cost and the
terminal set are therefore computed for the relative error e = x_nbr - x_own,
in a frame where the own input is the neighbor input plus the feedback term.

The terminal set is the set of lifted states whose terminal-law trajectory
satisfies the coupled constraints for ``prefix`` steps and then lies in an
invariant cone built around the dominant real mode. The cone is contractive
by construction, so the set is exactly positively invariant.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from ..numkernel import (Polytope, solve_discrete_lyapunov, spectral_radius,
                         support_function, lyapunov_residual)


class TerminalError(ValueError):
    pass


def lift_absolute(A_aug, B_aug, B1_aug, K, abar):
    """A_xi = [[0 I], [0 A]] + [[0 0], [B K 0]] and B_xi = [0; B1]."""
    nx = A_aug.shape[0]
    n = nx * abar
    A_xi = np.zeros((n, n))
    A_xi[: n - nx, nx:] = np.eye(n - nx)
    A_xi[n - nx:, n - nx:] = A_aug
    A_xi[n - nx:, :nx] += B_aug @ K
    B_xi = np.zeros((n, B1_aug.shape[1]))
    B_xi[n - nx:] = B1_aug
    return A_xi, B_xi


def lift_relative(A, B, k, abar):
    """Lifted error dynamics under u_own = u_nbr + k e_oldest."""
    nx = A.shape[0]
    n = nx * abar
    M = np.zeros((n, n))
    M[: n - nx, nx:] = np.eye(n - nx)
    M[n - nx:, n - nx:] = A
    M[n - nx:, :nx] -= B @ np.atleast_2d(k)
    return M


def _regular_polygon(m: int, phase: float = 0.0):
    ang = phase + 2 * np.pi * np.arange(m) / m
    return np.column_stack([np.cos(ang), np.sin(ang)])


def _invariant_cone(M, gap_rows, fraction=1.0, tol=1e-9):
    """Polyhedral cone {|fast part| <= beta z1}, invariant under M.

    Returns (rows, z1 functional, v1) with rows R xi <= 0.
    """
    n = M.shape[0]
    lam, V = np.linalg.eig(M)
    order = np.argsort(-np.abs(lam))
    lam, V = lam[order], V[:, order]
    lam1 = lam[0]
    if abs(lam1.imag) > tol or abs(lam[1]) >= abs(lam1) - 1e-6:
        raise TerminalError("dominant eigenvalue must be real and simple")
    lam1 = lam1.real
    if lam1 <= 0:
        raise TerminalError("dominant eigenvalue must be positive")
    v1 = V[:, 0].real
    v1 = v1 / np.max(np.abs(v1))
    if np.mean(gap_rows @ v1) < 0:
        v1 = -v1

    # complex pairs with non-negligible modulus get polygon norms
    blocks = []
    used = [0]
    for idx in range(1, n):
        if idx in used or abs(lam[idx]) < 1e-6:
            continue
        if abs(lam[idx].imag) > tol:
            mate = next(j for j in range(idx + 1, n)
                        if j not in used and abs(lam[j] - np.conj(lam[idx])) < 1e-8)
            used += [idx, mate]
            r = abs(lam[idx])
            m = 4
            while r / np.cos(np.pi / m) >= lam1 * (1 - 1e-3):
                m += 2
            blocks.append(("pair", np.column_stack([V[:, idx].real, V[:, idx].imag]), m))
        else:
            used.append(idx)
            blocks.append(("real", V[:, [idx]].real, None))
    basis = [v1[:, None]] + [b[1] for b in blocks]
    Bm = np.hstack(basis)
    # remaining (nilpotent) generalized eigenspace
    rest = n - Bm.shape[1]
    if rest:
        Mp = np.linalg.matrix_power(M, n)
        U0 = sla.null_space(Mp, rcond=1e-10)
        if U0.shape[1] != rest:
            raise TerminalError("could not isolate the nilpotent subspace")
        Bm = np.hstack([Bm, U0])
    W = np.linalg.inv(Bm)  # modal coordinates
    z1 = W[0]
    pos = 1
    fast = []  # (coordinate rows, unit-ball facet matrix)
    for kind, basis_b, m in blocks:
        d = basis_b.shape[1]
        Wb = W[pos:pos + d]
        pos += d
        if kind == "pair":
            fast.append((Wb, _regular_polygon(m)))
        else:
            fast.append((Wb, np.array([[1.0], [-1.0]])))
    if rest:
        Wn = W[pos:]
        Nn = Wn @ M @ Bm[:, pos:]  # nilpotent restriction
        c = 0.5 * lam1
        rows = []
        for t in range(rest):
            Nt = np.linalg.matrix_power(Nn, t) / c ** t
            if np.max(np.abs(Nt)) > 1e-12:
                rows += [Nt, -Nt]
        fast.append((Wn, np.vstack(rows)))

    # largest beta with the gap rows nonnegative on the cone
    betas = []
    for g in gap_rows:
        num = g @ v1
        den = 0.0
        # express g in modal coordinates: g.xi = sum_c (g Bm)_c coord_c
        gm = g @ Bm
        den = 0.0
        pos = 1
        for Wb, F in fast:
            d = Wb.shape[0]
            den += support_function(Polytope(F, np.ones(F.shape[0]), check=False),
                                    gm[pos:pos + d])
            pos += d
        if num <= 0:
            raise TerminalError("dominant mode violates the coupled constraint")
        betas.append(num / den if den > 0 else np.inf)
    beta = fraction * min(betas)
    R = []
    for Wb, F in fast:
        R.append(F @ Wb - beta * np.outer(np.ones(F.shape[0]), z1))
    R.append(-z1[None, :])
    return np.vstack(R), z1, v1, lam1, beta, Bm, fast


def _prune(C, b, keep_tol=1e-9):
    """Remove redundant rows of {C x <= b} by LP."""
    n = C.shape[1]
    C = np.asarray(C, dtype=float)
    b = np.asarray(b, dtype=float)
    # normalize and deduplicate
    s = np.linalg.norm(C, axis=1)
    nz = s > 1e-12
    C, b, s = C[nz], b[nz], s[nz]
    C, b = C / s[:, None], b / s
    _, uniq = np.unique(np.round(np.column_stack([C, b]), 10), axis=0, return_index=True)
    C, b = C[np.sort(uniq)], b[np.sort(uniq)]
    keep = np.ones(len(b), dtype=bool)
    for i in range(len(b)):
        keep[i] = False
        Ci, bi = C[keep], b[keep]
        Ci = np.vstack([Ci, C[i]])
        bi = np.append(bi, b[i] + 1.0)
        res = linprog(-C[i], A_ub=Ci, b_ub=bi, bounds=[(None, None)] * n, method="highs")
        if res.status != 0 or -res.fun > b[i] + keep_tol:
            keep[i] = True
    return C[keep], b[keep]


def braking_set(A, B, u_bound_own: float, u_bound_nbr: float, gap_lo: float = 0.0,
                vel_floor: float = 20.0) -> Polytope:
    """Relative states from which full own braking keeps the gap above
    ``gap_lo`` for every neighbor input sequence.

    The rows are gap(t) >= gap_lo for t = 0..T under u_own = -u_bound_own and
    the worst neighbor input, plus e_vel >= -vel_floor; T is chosen so that the
    minimum over t of the (convex) worst-case gap lies within the rows, which
    makes the set invariant under braking.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float).reshape(-1)
    nx = A.shape[0]
    margin = u_bound_own - u_bound_nbr
    if margin <= 0:
        raise TerminalError("own input bound must exceed the neighbor's")
    g = np.zeros(nx)
    g[0] = 1.0
    # worst-case gap after t braking steps: g A^t e + sum_j (c_j u_own - |c_j| u_nbr)
    rows, rhs = [], []
    At = np.eye(nx)
    offset = 0.0
    coefs = []
    t = 0
    while True:
        rows.append(-(g @ At))
        rhs.append(offset - gap_lo)
        c = g @ At @ B  # effect of the input applied t steps before
        coefs.append(c)
        offset += c * u_bound_own - abs(c) * u_bound_nbr
        At = A @ At
        t += 1
        # the worst-case gap is convex in t; stop once the increment is
        # nonnegative for every admissible velocity error
        vel = np.zeros(nx)
        vel[-1] = -vel_floor
        if t > 2 and g @ (At - np.linalg.matrix_power(A, t - 1)) @ vel + \
                (c * u_bound_own - abs(c) * u_bound_nbr) >= 0:
            break
        if t > 10000:
            raise TerminalError("braking set does not close")
    floor = np.zeros(nx)
    floor[-1] = -1.0
    rows.append(floor)
    rhs.append(vel_floor)
    return Polytope(np.array(rows), np.array(rhs))


@dataclass
class TerminalIngredients:
    abar: int
    K: np.ndarray  # absolute gain on [own; neighbor] of the oldest block
    k_rel: np.ndarray
    A_xi: np.ndarray  # absolute lifted dynamics
    B_xi: np.ndarray
    A_rel: np.ndarray
    T_xi: np.ndarray  # absolute lifted state -> relative lifted state
    Q_rel: np.ndarray
    P_rel: np.ndarray
    P: np.ndarray  # absolute terminal weight T' P_rel T
    Q_xi: np.ndarray
    X_rel: Polytope
    u_margin: float  # admissible |k e| under the feedforward law
    gap_bounds: tuple
    info: dict = field(default_factory=dict)
    X_safe: Polytope | None = None  # braking-safe set on the newest error block
    u_bounds: tuple = (np.inf, np.inf)  # (own braking level, neighbor bound)
    A_sub: np.ndarray | None = None  # subsystem model, e+ = A e + B (u_nbr - u_own)
    B_sub: np.ndarray | None = None

    @property
    def X_abs(self) -> Polytope:
        return Polytope(self.X_rel.C @ self.T_xi, self.X_rel.b, check=False)


def relative_map(nx, abar):
    Te = np.hstack([-np.eye(nx), np.eye(nx)])
    return np.kron(np.eye(abar), Te)


def synthesize_terminal(A, B, K, Qx, Qu, abar: int, u_bound_own: float,
                        u_bound_nbr: float, gap_bounds=(0.0, 200.0),
                        prefix: int = 40, cone_fraction: float = 1.0,
                        brake_level: float = 0.99,
                        vel_floor: float = 10.0) -> TerminalIngredients:
    """Build and verify terminal ingredients for a single-neighbor subsystem.

    ``K`` is the absolute gain row on [own; neighbor]; it must be translation
    invariant (own block = -neighbor block) so it acts on the relative error.
    """
    return _synth(_key(A), _key(B), _key(K), _key(Qx), _key(Qu), int(abar),
                  float(u_bound_own), float(u_bound_nbr),
                  tuple(float(x) for x in gap_bounds), int(prefix), float(cone_fraction),
                  float(brake_level), float(vel_floor))


def _key(a):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return (a.shape, tuple(a.ravel()))


def _arr(key):
    shape, data = key
    return np.array(data).reshape(shape)


@lru_cache(maxsize=16)
def _synth(Ak, Bk, Kk, Qxk, Quk, abar, ub_own, ub_nbr, gap_bounds, prefix, fraction,
           brake_level, vel_floor):
    A, B, K, Qx, Qu = map(_arr, (Ak, Bk, Kk, Qxk, Quk))
    nx = A.shape[0]
    if K.shape != (1, 2 * nx):
        raise TerminalError("terminal gain must be a row on [own; neighbor]")
    k = K[0, nx:]
    if not np.allclose(K[0, :nx], -k):
        raise TerminalError("terminal gain must act on the relative error")
    if abar < 1:
        raise TerminalError("abar must be at least 1")

    A_aug = np.kron(np.eye(2), A)
    B_aug = np.vstack([B, np.zeros_like(B)])
    B1_aug = np.vstack([np.zeros_like(B), B])
    A_xi, B_xi = lift_absolute(A_aug, B_aug, B1_aug, K, abar)
    A_rel = lift_relative(A, B, k, abar)
    T_xi = relative_map(nx, abar)

    n = nx * abar
    Qe = Qx[nx:, nx:]  # Qx = [[Q, -Q], [-Q, Q]] -> Q on the error
    if not np.allclose(Qx, np.kron(np.array([[1, -1], [-1, 1]]), Qe)):
        raise TerminalError("stage weight must penalize the relative error")
    ru = Qu[0, 0]
    Q_rel = np.zeros((n, n))
    Q_rel[:nx, :nx] = ru * np.outer(k, k)
    Q_rel[n - nx:, n - nx:] += Qe
    P_rel = solve_discrete_lyapunov(A_rel, Q_rel)
    Q_xi = np.zeros((2 * n, 2 * n))
    Ku = np.zeros((2, 2 * nx))
    Ku[0] = K[0]
    Q_xi[:2 * nx, :2 * nx] = Ku.T @ Qu @ Ku
    Q_xi[-2 * nx:, -2 * nx:] += Qx
    P = T_xi.T @ P_rel @ T_xi

    # coupled constraint rows on one error block: lo <= gap <= hi
    g = np.zeros(nx)
    g[0] = 1.0
    lo, hi = gap_bounds
    u_margin = ub_own - ub_nbr
    if u_margin <= 0:
        raise TerminalError("own input bound must exceed the neighbor's")

    def block(i):
        E = np.zeros((nx, n))
        E[:, i * nx:(i + 1) * nx] = np.eye(nx)
        return E

    gap_rows = np.vstack([g @ block(i) for i in range(abar)])
    cone, z1, v1, lam1, beta, Bm, fast = _invariant_cone(A_rel, gap_rows, fraction)

    # cap z1 <= zmax so that the cone satisfies the upper gap and input bounds
    def cone_sup(c):
        cm = c @ Bm
        val = cm[0]
        pos = 1
        for Wb, F in fast:
            d = Wb.shape[0]
            val += beta * support_function(
                Polytope(F, np.ones(F.shape[0]), check=False), cm[pos:pos + d])
            pos += d
        return val

    caps = [hi / cone_sup(gr) for gr in gap_rows]
    kb = k @ block(0)
    caps += [u_margin / cone_sup(kb), u_margin / cone_sup(-kb)]
    zmax = min(c for c in caps if c > 0)

    rows, rhs = [], []
    Mt = np.eye(n)
    for t in range(prefix):
        blocks = range(abar) if t == 0 else [abar - 1]
        for i in blocks:
            r = g @ block(i) @ Mt
            rows += [-r, r]
            rhs += [-lo, hi]
        r = kb @ Mt
        rows += [r, -r]
        rhs += [u_margin, u_margin]
        Mt = A_rel @ Mt
    rows += list(cone @ Mt)
    rhs += [0.0] * cone.shape[0]
    rows.append(z1 @ Mt)
    rhs.append(zmax)
    C, b = _prune(np.array(rows), np.array(rhs))
    X_rel = Polytope(C, b)

    term = TerminalIngredients(abar, K, k, A_xi, B_xi, A_rel, T_xi, Q_rel, P_rel, P,
                               Q_xi, X_rel, u_margin, gap_bounds,
                               info=dict(beta=beta, lam1=lam1, zmax=zmax,
                                         prefix=prefix, rows=len(b)),
                               X_safe=braking_set(A, B, brake_level * ub_own, ub_nbr, lo,
                                                  vel_floor),
                               u_bounds=(brake_level * ub_own, ub_nbr), A_sub=A, B_sub=B)
    return term


def verify_terminal(term: TerminalIngredients, tol: float = 1e-8) -> dict:
    """Check the terminal assumptions; returns {name: (passed, measure)}."""
    X = term.X_rel
    out = {}
    rho = spectral_radius(term.A_rel)
    out["schur"] = (rho < 1.0, rho)
    res = lyapunov_residual(term.A_rel, term.P_rel, term.Q_rel)
    out["lyapunov"] = (res <= tol, res)
    # absolute-frame residual must vanish as well (A_xi maps onto A_rel)
    Rabs = term.A_xi.T @ term.P @ term.A_xi - term.P + term.Q_xi
    res_abs = float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (Rabs + Rabs.T)))))
    out["lyapunov_abs"] = (res_abs <= tol * (1 + np.abs(term.P).max()), res_abs)

    # invariance: the feedforward law cancels every neighbor input, so one
    # support evaluation per facet covers all neighbor-input vertices
    worst = -np.inf
    for c, d in zip(X.C, X.b):
        worst = max(worst, support_function(X, c @ term.A_rel) - d)
    out["invariance"] = (worst <= tol, worst)

    # coupled constraints and input admissibility on X
    n = X.dim
    nx = n // term.abar
    lo, hi = term.gap_bounds
    viol = -np.inf
    for i in range(term.abar):
        g = np.zeros(n)
        g[i * nx] = 1.0
        viol = max(viol, support_function(X, g) - hi, support_function(X, -g) + lo)
    out["state_constraints"] = (viol <= tol, viol)
    kb = np.zeros(n)
    kb[:nx] = term.k_rel
    umax = max(support_function(X, kb), support_function(X, -kb))
    out["input_admissible"] = (umax <= term.u_margin + tol, umax - term.u_margin)

    # zero stage cost on the window implies zero terminal cost
    nxa = 2 * nx
    Qblk = np.kron(np.eye(term.abar), term.Q_xi[-nxa:, -nxa:])
    ker = sla.null_space(Qblk)
    kerval = float(np.max(np.abs(ker.T @ term.P @ ker))) if ker.size else 0.0
    out["kernel"] = (kerval <= tol, kerval)

    if term.X_safe is not None:
        out["braking_invariance"] = braking_invariance(term, tol)
    return out


def braking_invariance(term: TerminalIngredients, tol: float = 1e-8):
    """One step of full own braking maps X_safe into itself for every
    neighbor input; returns (passed, worst excess)."""
    S = term.X_safe
    nx = S.dim
    A = term.A_sub
    Bv = term.B_sub[:, 0]
    ub_own, ub_nbr = term.u_bounds
    worst = -np.inf
    for c, d in zip(S.C, S.b):
        cb = c @ Bv
        val = support_function(S, c @ A) + cb * ub_own + abs(cb) * ub_nbr
        worst = max(worst, val - d)
    return worst <= tol, worst


# terminal assumptions and the checks that establish them
ASSUMPTIONS = {
    "robust invariance": ("invariance", "state_constraints", "braking_invariance"),
    "input admissibility": ("input_admissible",),
    "lyapunov decrease": ("schur", "lyapunov", "lyapunov_abs"),
    "kernel alignment": ("kernel",),
}


def assumption_status(checks: dict) -> dict:
    """Group :func:`verify_terminal` output by assumption: name -> (passed, failed checks)."""
    out = {}
    for name, keys in ASSUMPTIONS.items():
        failed = [key for key in keys if key in checks and not checks[key][0]]
        out[name] = (not failed, failed)
    return out
