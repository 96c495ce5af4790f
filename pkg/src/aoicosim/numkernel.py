"""Numerical kernels: convex QP, discrete Lyapunov equation, polytope support.

The QP solver wraps Clarabel (interior point) and refines its answer with an
active-set polish so that the KKT residuals reach the configured tolerance.
Infeasibility is certified by a phase-1 LP that reports the minimal uniform
constraint violation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog

import clarabel


class NumericalError(ValueError):
    """Raised for malformed or non-finite inputs."""


class DimensionError(NumericalError):
    pass


class UnboundedSupportError(NumericalError):
    pass


class StabilityError(NumericalError):
    pass


@dataclass
class Tolerances:
    """Central tolerance settings shared by all kernels."""

    kkt: float = 1e-8
    infeasibility: float = 1e-7
    hessian_reg: float = 1e-9
    lyapunov_rel: float = 1e-9
    support: float = 1e-9
    feasibility: float = 1e-7
    max_multiplier: float = 1e8  # relative to 1 + |g| + |H|; larger means degenerate


TOL = Tolerances()


def _check_finite(name, arr):
    data = arr.data if sp.issparse(arr) else np.asarray(arr)
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite entries in {name}")


# ---------------------------------------------------------------------------
# Polytopes

@dataclass
class Polytope:
    """H-representation {x : C x <= b}."""

    C: np.ndarray
    b: np.ndarray
    check: bool = True

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.C.shape[0] != self.b.size:
            raise DimensionError(
                f"polytope has {self.C.shape[0]} rows but {self.b.size} offsets")
        _check_finite("C", self.C)
        _check_finite("b", self.b)
        if self.check and self.C.shape[0] > 0:
            res = linprog(np.zeros(self.dim), A_ub=self.C, b_ub=self.b,
                          bounds=[(None, None)] * self.dim, method="highs")
            if res.status == 2:
                raise NumericalError("polytope is empty")

    @property
    def dim(self) -> int:
        return self.C.shape[1]

    @classmethod
    def box(cls, lo, hi):
        lo = np.asarray(lo, dtype=float).reshape(-1)
        hi = np.asarray(hi, dtype=float).reshape(-1)
        eye = np.eye(lo.size)
        return cls(np.vstack([eye, -eye]), np.concatenate([hi, -lo]))

    def contains(self, x, tol: float = 0.0) -> bool:
        return bool(np.all(self.C @ np.asarray(x, dtype=float) <= self.b + tol))

    def scaled(self, alpha: float) -> "Polytope":
        return Polytope(self.C, alpha * self.b, check=False)


def support_function(poly: Polytope, d, tol: Tolerances = TOL) -> float:
    """h(d) = max d.x over the polytope.

    Solved as an LP with HiGHS; the optimal vertex is then recomputed from its
    active constraints so the value is accurate to roughly machine precision.
    """
    d = np.asarray(d, dtype=float).reshape(-1)
    if d.size != poly.dim:
        raise DimensionError(f"direction has length {d.size}, expected {poly.dim}")
    _check_finite("direction", d)
    if not np.any(d):
        return 0.0
    # solve on the set normalized to unit offsets so accuracy does not depend
    # on the scale of the polytope
    scale = float(np.abs(poly.b).max(initial=0.0)) or 1.0
    val = _support_normalized(poly.C, poly.b / scale, d)
    return scale * val


def _support_normalized(C, b, d):
    poly = Polytope(C, b, check=False)
    res = linprog(-d, A_ub=poly.C, b_ub=poly.b,
                  bounds=[(None, None)] * poly.dim, method="highs")
    if res.status == 3:
        raise UnboundedSupportError("unbounded support")
    if res.status == 2:
        raise NumericalError("polytope is empty")
    if res.status != 0:
        raise NumericalError(f"support LP failed: {res.message}")
    x = res.x
    val = float(d @ x)
    slack = poly.b - poly.C @ x
    order = np.argsort(slack)
    act = order[: poly.dim]
    Ca = poly.C[act]
    if np.linalg.matrix_rank(Ca) == poly.dim and slack[act].max() < 1e-6:
        xv = np.linalg.solve(Ca, poly.b[act])
        if np.all(poly.C @ xv <= poly.b + 1e-9 * (1 + np.abs(poly.b))):
            vv = float(d @ xv)
            if abs(vv - val) <= 1e-6 * (1 + abs(val)):
                val = max(vv, val) if np.all(poly.C @ xv <= poly.b) else vv
    return val


# ---------------------------------------------------------------------------
# QP

@dataclass
class QpProblem:
    """min 0.5 x'Hx + g'x  s.t.  C x <= b,  E x = e."""

    H: object
    g: np.ndarray
    C: object = None
    b: np.ndarray = None
    E: object = None
    e: np.ndarray = None

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        n = self.g.size
        self.H = sp.csc_matrix(self.H, dtype=float)
        if self.H.shape != (n, n):
            raise DimensionError(f"Hessian shape {self.H.shape} does not match n={n}")
        self.C, self.b = self._pair(self.C, self.b, n, "inequality")
        self.E, self.e = self._pair(self.E, self.e, n, "equality")
        for name, arr in (("H", self.H), ("g", self.g), ("C", self.C), ("b", self.b),
                          ("E", self.E), ("e", self.e)):
            _check_finite(name, arr)

    @staticmethod
    def _pair(M, v, n, kind):
        if M is None:
            return sp.csr_matrix((0, n)), np.zeros(0)
        M = sp.csr_matrix(M, dtype=float)
        v = np.asarray(v, dtype=float).reshape(-1)
        if M.shape[1] != n:
            raise DimensionError(f"{kind} matrix has {M.shape[1]} columns, expected {n}")
        if M.shape[0] != v.size:
            raise DimensionError(f"{kind} matrix has {M.shape[0]} rows but rhs has {v.size}")
        return M, v

    @property
    def n(self) -> int:
        return self.g.size


@dataclass
class QpSolution:
    status: str  # "optimal" | "infeasible" | "max-iterations"
    x: np.ndarray | None = None
    z: np.ndarray | None = None  # inequality multipliers
    y: np.ndarray | None = None  # equality multipliers
    objective: float = np.nan
    residuals: dict = field(default_factory=dict)
    min_violation: float = 0.0
    regularization: float = 0.0
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def kkt_residuals(prob: QpProblem, x, z, y, H=None, scaled: bool = True) -> dict:
    """KKT residuals (infinity norms).

    With ``scaled`` each residual is divided by one plus the magnitude of the
    terms it balances, which makes the check independent of the data scale.
    """
    H = prob.H if H is None else H
    Hx, Cz, Ey = H @ x, prob.C.T @ z, prob.E.T @ y
    Cx, Ex = prob.C @ x, prob.E @ x
    slack = prob.b - Cx
    inf = lambda v: float(np.max(np.abs(v), initial=0.0))
    out = {
        "stationarity": inf(Hx + prob.g + Cz + Ey),
        "primal": float(np.max(np.maximum(-slack, 0.0), initial=0.0)),
        "equality": inf(Ex - prob.e),
        "dual": float(np.max(np.maximum(-z, 0.0), initial=0.0)),
        "complementarity": inf(z * slack),
    }
    if scaled:
        out["stationarity"] /= 1.0 + max(inf(Hx), inf(prob.g), inf(Cz), inf(Ey))
        out["primal"] /= 1.0 + max(inf(Cx), inf(prob.b))
        out["equality"] /= 1.0 + max(inf(Ex), inf(prob.e))
        out["dual"] /= 1.0 + inf(z)
        out["complementarity"] /= (1.0 + inf(z)) * (1.0 + max(inf(Cx), inf(prob.b)))
    return out


def _min_eig(H: sp.spmatrix) -> float:
    n = H.shape[0]
    if n == 0:
        return 0.0
    Hd = H.toarray()
    nz = np.flatnonzero(np.any(Hd != 0, axis=0) | np.any(Hd != 0, axis=1))
    if nz.size == 0:
        return 0.0
    lam = float(np.linalg.eigvalsh(Hd[np.ix_(nz, nz)])[0])
    if nz.size < n:
        lam = min(lam, 0.0)
    return lam


def _phase1(prob: QpProblem) -> float:
    """Minimal uniform violation t of C x <= b + t subject to E x = e."""
    n, m = prob.n, prob.C.shape[0]
    c = np.zeros(n + 1)
    c[-1] = 1.0
    A_ub = sp.hstack([prob.C, -np.ones((m, 1))]).tocsr() if m else None
    A_eq = sp.hstack([prob.E, sp.csr_matrix((prob.E.shape[0], 1))]).tocsr() \
        if prob.E.shape[0] else None
    bounds = [(None, None)] * n + [(0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=prob.b if m else None, A_eq=A_eq,
                  b_eq=prob.e if prob.E.shape[0] else None, bounds=bounds,
                  method="highs")
    if res.status == 2:
        # equality system itself inconsistent
        xe = spla.lsqr(prob.E, prob.e)[0]
        return float(np.max(np.abs(prob.E @ xe - prob.e)))
    if res.status != 0:
        return np.inf
    return float(res.x[-1])


def _eq_qp(prob: QpProblem, H, active):
    """Solve the equality-constrained QP with the given active rows."""
    M = sp.vstack([prob.C[active], prob.E]).tocsc()
    rhs_c = np.concatenate([prob.b[active], prob.e])
    n, na = prob.n, M.shape[0]
    delta = 1e-11
    K = sp.bmat([[H, M.T], [M, None]], format="csc") if na else H.tocsc()
    Kreg = (K + sp.block_diag([delta * sp.eye(n), -delta * sp.eye(na)])).tocsc() \
        if na else K
    try:
        lu = spla.splu(Kreg)
    except RuntimeError:
        return None
    rhs = np.concatenate([-prob.g, rhs_c])
    sol = lu.solve(rhs)
    for _ in range(10):
        r = rhs - K @ sol
        if np.max(np.abs(r)) < 1e-14 * (1 + np.max(np.abs(rhs))):
            break
        sol = sol + lu.solve(r)
    if not np.all(np.isfinite(sol)):
        return None
    return sol[:n], sol[n:n + active.size], sol[n + active.size:]


def _polish(prob: QpProblem, H, x, z, y, tol, rounds: int = 10):
    """Primal-dual active-set refinement started from the IPM estimate."""
    slack = prob.b - prob.C @ x
    active = set(np.flatnonzero(z > slack).tolist())
    m = prob.C.shape[0]
    for _ in range(rounds):
        act = np.array(sorted(active), dtype=int)
        out = _eq_qp(prob, H, act)
        if out is None:
            return None
        xp, za, yp = out
        zp = np.zeros(m)
        zp[act] = za
        sl = prob.b - prob.C @ xp
        viol = np.flatnonzero(sl < -tol)
        neg = act[za < -tol]
        if viol.size == 0 and neg.size == 0:
            return xp, np.maximum(zp, 0.0), yp
        active |= set(viol.tolist())
        active -= set(neg.tolist())
    return None


def solve_qp(prob: QpProblem, tol: Tolerances = TOL, max_iter: int = 200) -> QpSolution:
    """Solve a convex QP.

    The Hessian is shifted by eps = max(0, -lambda_min) + hessian_reg before
    solving. On success all KKT residuals of the regularized problem are below
    ``tol.kkt``; otherwise the status is ``"max-iterations"``.
    """
    n = prob.n
    lam = _min_eig(prob.H)
    eps = max(0.0, -lam) + tol.hessian_reg
    H = (prob.H + eps * sp.eye(n, format="csc")).tocsc()
    m_eq, m_in = prob.E.shape[0], prob.C.shape[0]

    if m_eq + m_in == 0:
        x = spla.spsolve(H, -prob.g) if n else np.zeros(0)
        x = np.atleast_1d(x)
        z, y = np.zeros(0), np.zeros(0)
        res = kkt_residuals(prob, x, z, y, H)
        return QpSolution("optimal", x, z, y, float(0.5 * x @ (H @ x) + prob.g @ x),
                          res, regularization=eps)

    dual_cap = tol.max_multiplier * (1.0 + np.abs(prob.g).max(initial=0.0)
                                     + abs(H).max())

    def score(r, z, y):
        # scaled residuals say nothing once the multipliers blow up
        if max(np.abs(z).max(initial=0.0), np.abs(y).max(initial=0.0)) > dual_cap:
            return np.inf
        return max(r.values())

    def attempt(b_ineq):
        """Interior-point solve, then keep the better of raw and polished."""
        x, z, y, iters = _clarabel(prob, H, b_ineq, max_iter)
        if x is None:
            return None, iters
        r = kkt_residuals(prob, x, z, y, H)
        best = (score(r, z, y), x, z, y, r)
        if best[0] > tol.kkt:
            pol = _polish(prob, H, x, z, y, tol.kkt)
            if pol is not None:
                r = kkt_residuals(prob, *pol, H)
                if score(r, *pol[1:]) < best[0]:
                    best = (score(r, *pol[1:]), *pol, r)
        return best, iters

    best, iters = attempt(prob.b)
    viol = None
    if best is None or best[0] > tol.kkt:
        viol = _phase1(prob)
        if viol > tol.infeasibility:
            return QpSolution("infeasible", min_violation=viol, regularization=eps,
                              iterations=iters)
        # feasible but possibly without interior: retry on a slightly
        # relaxed set, still judged by the residuals of the original problem
        relax = viol + 0.5 * tol.kkt
        retry, more = attempt(prob.b + relax)
        iters += more
        if retry is not None and (best is None or retry[0] < best[0]):
            best = retry
    if best is not None and best[0] <= tol.kkt:
        _, x, z, y, r = best
        return QpSolution("optimal", x, z, y, float(0.5 * x @ (H @ x) + prob.g @ x),
                          r, regularization=eps, iterations=iters)
    sol = QpSolution("max-iterations", min_violation=viol, regularization=eps,
                     iterations=iters)
    if best is not None:
        sol.x, sol.z, sol.y, sol.residuals = best[1], best[2], best[3], best[4]
    return sol


def _clarabel(prob: QpProblem, H, b_ineq, max_iter):
    m_eq, m_in = prob.E.shape[0], prob.C.shape[0]
    A = sp.vstack([prob.E, prob.C]).tocsc()
    bvec = np.concatenate([prob.e, b_ineq])
    cones = []
    if m_eq:
        cones.append(clarabel.ZeroConeT(m_eq))
    if m_in:
        cones.append(clarabel.NonnegativeConeT(m_in))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_gap_abs = 1e-12
    settings.tol_gap_rel = 1e-12
    settings.tol_feas = 1e-12
    settings.tol_ktratio = 1e-10
    settings.presolve_enable = False
    solver = clarabel.DefaultSolver(sp.triu(H).tocsc(), prob.g, A, bvec, cones, settings)
    out = solver.solve()
    x = np.asarray(out.x, dtype=float)
    if x.size != prob.n or not np.all(np.isfinite(x)):
        return None, None, None, out.iterations
    zz = np.asarray(out.z, dtype=float)
    return x, np.maximum(zz[m_eq:], 0.0), zz[:m_eq].copy(), out.iterations


# ---------------------------------------------------------------------------
# Lyapunov

def spectral_radius(A) -> float:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def lyapunov_residual(A, P, Q) -> float:
    A = np.atleast_2d(A)
    R = A.T @ P @ A - P + Q
    return float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (R + R.T)))))


def solve_discrete_lyapunov(A, Q, tol: Tolerances = TOL) -> np.ndarray:
    """Solve A' P A - P + Q = 0 for Schur-stable A."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if A.shape[0] != A.shape[1] or Q.shape != A.shape:
        raise DimensionError(f"incompatible shapes A{A.shape}, Q{Q.shape}")
    _check_finite("A", A)
    _check_finite("Q", Q)
    if spectral_radius(A) >= 1.0:
        raise StabilityError("terminal dynamics not Schur-stable")
    Q = 0.5 * (Q + Q.T)
    P = sla.solve_discrete_lyapunov(A.T, Q)
    P = 0.5 * (P + P.T)
    bound = tol.lyapunov_rel * (1.0 + np.linalg.norm(Q, 2))
    for _ in range(5):
        R = A.T @ P @ A - P + Q
        if np.max(np.abs(R)) <= 1e-3 * bound:
            break
        dP = sla.solve_discrete_lyapunov(A.T, R)
        P = P + 0.5 * (dP + dP.T)
    if lyapunov_residual(A, P, Q) > bound:
        raise NumericalError("Lyapunov solution failed the residual check")
    return P
