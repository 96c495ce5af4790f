"""Slow, independent reference implementations used to check the kernels."""
from __future__ import annotations

from itertools import combinations, product

import numpy as np


def qp_dual_fista(H, g, C, b, iters: int = 200000, tol: float = 1e-14):
    """min 0.5 x'Hx + g'x s.t. Cx <= b for positive definite H.

    Accelerated projected gradient ascent on the dual; returns the primal
    point x(z) = -H^{-1}(g + C'z).
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    b = np.asarray(b, dtype=float)
    L = np.linalg.cholesky(H)
    Hinv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(H.shape[0])))
    M = C @ Hinv @ C.T
    step = 1.0 / np.linalg.eigvalsh(M)[-1]
    z = np.zeros(C.shape[0])
    y, t = z.copy(), 1.0
    for _ in range(iters):
        x = -Hinv @ (g + C.T @ y)
        z_new = np.maximum(0.0, y + step * (C @ x - b))
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = z_new + (t - 1.0) / t_new * (z_new - z)
        if np.max(np.abs(z_new - z)) < tol:
            z = z_new
            break
        z, t = z_new, t_new
    return -Hinv @ (g + C.T @ z)


def support_by_vertices(C, b, d, tol: float = 1e-9) -> float:
    """max d'x over {Cx <= b} by enumerating vertices (all n-row subsets)."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    b = np.asarray(b, dtype=float)
    n = C.shape[1]
    best = -np.inf
    for rows in combinations(range(C.shape[0]), n):
        M = C[list(rows)]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        v = np.linalg.solve(M, b[list(rows)])
        if np.all(C @ v <= b + tol):
            best = max(best, float(d @ v))
    return best


def lyapunov_fixed_point(A, Q, tol: float = 1e-15, max_iter: int = 1000000):
    """Iterate P <- A'PA + Q until the update stalls."""
    A = np.asarray(A, dtype=float)
    P = np.asarray(Q, dtype=float).copy()
    for _ in range(max_iter):
        P_new = A.T @ P @ A + Q
        if np.max(np.abs(P_new - P)) <= tol * (1.0 + np.max(np.abs(P_new))):
            return P_new
        P = P_new
    return P


def chain_paths_expectation(q, T, state: int, offsets) -> float:
    """E[prod p_{offsets}] by enumerating every state path of the chain."""
    q = np.asarray(q, dtype=float)
    T = np.asarray(T, dtype=float)
    offsets = list(offsets)
    if not offsets:
        return 1.0
    m = T.shape[0]
    total = 0.0
    for path in product(range(m), repeat=max(offsets)):
        states = (state,) + path
        prob = 1.0
        for a, c in zip(states, states[1:]):
            prob *= T[a, c]
        if prob == 0.0:
            continue
        total += prob * np.prod([q[states[o]] for o in offsets])
    return float(total)
