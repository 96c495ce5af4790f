"""Age-of-information dynamics, broadcast scheduling and AoI forecasts.

Conventions: ``a[i, j]`` is the age at receiver ``i`` of the freshest data
from sender ``j``; ``v[j] = 1`` means ``j`` broadcasts; ``p[j, i]`` is the
success indicator of the link ``j -> i``. Transmissions take one step, so a
successful broadcast at step ``k`` gives ``a_{k+1} = 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

MAX_EXPLICIT_STEPS = 20


class SchedulerError(ValueError):
    pass


def step_aoi(a, v, p) -> np.ndarray:
    """One AoI update a' = 1 + a (1 - v_j p_ji); the diagonal stays at 1."""
    a = np.asarray(a, dtype=float)
    v = np.asarray(v, dtype=float)
    p = np.asarray(p, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n) or v.shape != (n,) or p.shape != (n, n):
        raise SchedulerError("inconsistent AoI, schedule or success shapes")
    out = 1.0 + a * (1.0 - v[None, :] * p.T)
    np.fill_diagonal(out, 1.0)
    return out


def explicit_aoi(a0: float, v, p) -> float:
    """Closed-form AoI after k = len(v) steps for a single link.

    Sums over all subsets I of {0..k-1}: (-1)^|I| (a0 + min I) prod_{l in I} v_l p_l,
    plus k (min of the empty set is 0).
    """
    v = np.asarray(v, dtype=float)
    p = np.asarray(p, dtype=float)
    k = v.size
    if k > MAX_EXPLICIT_STEPS:
        raise SchedulerError(f"explicit AoI refused for k={k} > {MAX_EXPLICIT_STEPS}")
    x = v * p
    idx = [l for l in range(k) if x[l] != 0.0]
    total = float(k) + a0
    for r in range(1, len(idx) + 1):
        sign = -1.0 if r % 2 else 1.0
        for sub in combinations(idx, r):
            total += sign * (a0 + sub[0]) * float(np.prod(x[list(sub)]))
    return total


def iterate_aoi(a0: float, v, p) -> float:
    a = float(a0)
    for vl, pl in zip(v, p):
        a = 1.0 + a * (1.0 - vl * pl)
    return a


def admissible_single_broadcaster(n: int) -> np.ndarray:
    """Idle plus one unit vector per agent."""
    return np.vstack([np.zeros(n), np.eye(n)])


def weighted_pairs(weights):
    w = np.asarray(weights, dtype=float)
    return [(i, j, float(w[i, j])) for i in range(w.shape[0]) for j in range(w.shape[1])
            if i != j and w[i, j] > 0]


def _mean_success(channel, pairs, N, k):
    """mu[(i, j)][m] = E[p^{j->i}_{k+m}]."""
    return {(i, j): np.array([channel.mean_success((j, i), m, k) for m in range(N)])
            for i, j, _ in pairs}


def relaxed_pair(a0: float, vj, mu) -> float:
    """Sum over k = 1..N of the AoI driven by mean success rates."""
    a = float(a0)
    total = 0.0
    for vl, ml in zip(vj, mu):
        a = 1.0 + (1.0 - vl * ml) * a
        total += a
    return total


def relaxed_objective(channel, a0, schedule, weights, k: int = 0) -> float:
    """Weighted sum of relaxed expected AoI over the horizon len(schedule)."""
    S = np.asarray(schedule, dtype=float)
    pairs = weighted_pairs(weights)
    mu = _mean_success(channel, pairs, S.shape[0], k)
    a0 = np.asarray(a0, dtype=float)
    return sum(w * relaxed_pair(a0[i, j], S[:, j], mu[(i, j)]) for i, j, w in pairs)


def _exact_pair(chain, col, a0, vj, blocked):
    """Enumerate chain paths and Bernoulli outcomes for one link."""
    N = len(vj)

    def rec(l, state, a, prob):
        if l == N or prob == 0.0:
            return 0.0
        q = 0.0 if blocked[l] else chain.q[state, col]
        branches = [(a + 1.0, 1.0)]
        if vj[l]:
            branches = [(1.0, q), (a + 1.0, 1.0 - q)]
        total = 0.0
        for a_next, pb in branches:
            if pb == 0.0:
                continue
            pr = prob * pb
            total += pr * a_next
            for s_next in np.flatnonzero(chain.T[state]):
                total += rec(l + 1, s_next, a_next, pr * chain.T[state, s_next])
        return total

    return rec(0, chain.state, float(a0), 1.0)


def exact_objective(channel, a0, schedule, weights, k: int = 0) -> float:
    """Exact expected weighted AoI sum by exhaustive enumeration (small cases)."""
    S = np.asarray(schedule, dtype=float)
    N = S.shape[0]
    if N > 8 or S.shape[1] > 4:
        raise SchedulerError("exact objective limited to N <= 8 and n <= 4")
    a0 = np.asarray(a0, dtype=float)
    total = 0.0
    for i, j, w in weighted_pairs(weights):
        link = (j, i)
        if link not in channel.links:
            total += w * sum(a0[i, j] + l for l in range(1, N + 1))
            continue
        c, col = channel.links[link]
        blocked = [channel._blocked(link, k + l) for l in range(N)]
        total += w * _exact_pair(channel.chains[c], col, a0[i, j], S[:, j], blocked)
    return total


@dataclass
class GreedyResult:
    plan: np.ndarray  # N x n
    objective: float
    evaluations: int


class _Evaluator:
    """Batched relaxed-objective evaluation over candidate schedules."""

    def __init__(self, channel, a0, weights, L, k, robust=False, tie_weight=0.0):
        self.pairs = weighted_pairs(weights)
        mu = _mean_success(channel, self.pairs, L, k)
        if robust:
            # certain deliveries decide; uncertain ones at most break ties
            mu = {key: np.where(m >= 1.0, 1.0, tie_weight * m) for key, m in mu.items()}
        self.mu = mu
        self.a0 = np.asarray(a0, dtype=float)
        self.count = 0

    def batch(self, S):
        """S has shape (candidates, L, n); returns one value per candidate."""
        self.count += S.shape[0]
        total = np.zeros(S.shape[0])
        for i, j, w in self.pairs:
            a = np.full(S.shape[0], self.a0[i, j])
            acc = np.zeros(S.shape[0])
            mu = self.mu[(i, j)]
            for l in range(S.shape[1]):
                a = 1.0 + (1.0 - S[:, l, j] * mu[l]) * a
                acc += a
            total += w * acc
        return total


def _greedy_fill(ev, S, free, adm):
    """Greedily fix the ``free`` slots of S in place; returns the final value."""
    free = list(free)
    val = None
    while free:
        cands = []
        for slot in free:
            for ai in range(len(adm)):
                cands.append((slot, ai))
        batch = np.repeat(S[None], len(cands), axis=0)
        for c, (slot, ai) in enumerate(cands):
            batch[c, slot] = adm[ai]
        vals = ev.batch(batch)
        best = int(np.argmin(vals))  # first minimum: lowest slot, then adm index
        slot, ai = cands[best]
        S[slot] = adm[ai]
        free.remove(slot)
        val = float(vals[best])
    return val


def greedy_schedule(channel, a0, weights, N: int, adm, k: int = 0,
                    robust: bool = False, tie_weight: float = 0.0) -> GreedyResult:
    """Fix one slot per round, picking the (slot, vector) that lowers the relaxed
    objective most; unfixed slots count as idle. Ties go to the lowest slot,
    then the lowest admissible index. ``robust`` scores only certain deliveries."""
    adm = np.asarray(adm, dtype=float)
    ev = _Evaluator(channel, a0, weights, N, k, robust, tie_weight)
    S = np.zeros((N, adm.shape[1]))
    val = _greedy_fill(ev, S, range(N), adm)
    return GreedyResult(S, val, ev.count)


def commit_last_step(channel, a0, weights, prev_plan, adm, k: int = 0,
                     robust: bool = False, lookahead: bool = True,
                     tie_weight: float = 0.0) -> GreedyResult:
    """Keep the shifted previous plan and choose only the new last slot.

    With ``lookahead`` the new slot is picked by greedily planning N further
    slots after the kept prefix; only the first of them is committed.
    """
    adm = np.asarray(adm, dtype=float)
    prev = np.asarray(prev_plan, dtype=float)
    N, n = prev.shape
    L = 2 * N - 1 if lookahead else N
    ev = _Evaluator(channel, a0, weights, L, k, robust, tie_weight)
    S = np.zeros((L, n))
    S[:N - 1] = prev[1:]
    val = _greedy_fill(ev, S, range(N - 1, N if not lookahead else L), adm)
    return GreedyResult(S[:N].copy(), val, ev.count)


def exhaustive_schedule(channel, a0, weights, N: int, adm, k: int = 0,
                        exact: bool = True) -> GreedyResult:
    """Brute-force optimum over adm^N (reference for small horizons)."""
    adm = np.asarray(adm, dtype=float)
    from itertools import product
    best = None
    count = 0
    for combo in product(range(len(adm)), repeat=N):
        S = adm[list(combo)]
        f = exact_objective if exact else relaxed_objective
        val = f(channel, a0, S, weights, k)
        count += 1
        if best is None or val < best[0] - 1e-15:
            best = (val, S.copy())
    return GreedyResult(best[1], float(best[0]), count)


def forecast_pair(a: float, vj, mu, tau: float) -> np.ndarray:
    """AoI forecast a_{k+1|k} .. a_{k+N|k} for one link.

    The failure product prod_l (1 - v_l mu_l) is accumulated from the last
    reset. When it drops below ``tau`` at slot l, the forecast resets to
    l - f + 1 where f is the first attempted slot since the last reset (the
    age if the earliest attempt had succeeded). ``tau = 0`` only resets on
    certain delivery.
    """
    out = np.empty(len(vj))
    prod, first, cur = 1.0, None, float(a)
    for l, (vl, ml) in enumerate(zip(vj, mu)):
        x = vl * ml
        if x > 0 and first is None:
            first = l
        prod *= 1.0 - x
        if first is not None and (prod < tau or (tau == 0.0 and prod == 0.0)):
            cur = float(l - first + 1)
            prod, first = 1.0, None
        else:
            cur += 1.0
        out[l] = cur
    return out


def forecast_aoi(channel, a, plan, weights, tau: float, k: int = 0) -> dict:
    """Forecasts for every weighted pair, keyed by (receiver, sender)."""
    S = np.asarray(plan, dtype=float)
    pairs = weighted_pairs(weights)
    mu = _mean_success(channel, pairs, S.shape[0], k)
    a = np.asarray(a, dtype=float)
    return {(i, j): forecast_pair(a[i, j], S[:, j], mu[(i, j)], tau) for i, j, _ in pairs}


def generate_forecasts(channel, a, plan, weights, tau: float = 0.1, mode: str = "robust",
                       k: int = 0) -> dict:
    """Forecasts with the effective threshold of ``mode`` (robust mode uses 0)."""
    if mode not in ("robust", "stochastic"):
        raise SchedulerError(f"unknown network mode {mode!r}")
    if not 0.0 <= tau < 1.0:
        raise SchedulerError("tau must lie in [0, 1)")
    return forecast_aoi(channel, a, plan, weights, 0.0 if mode == "robust" else tau, k)


@dataclass
class NetworkController:
    """Schedules broadcasts and issues AoI forecasts each step."""

    channel: object
    weights: np.ndarray
    N: int = 8
    mode: str = "robust"  # robust | stochastic
    tau: float = 0.1
    strategy: str = "commit"  # commit | greedy
    lookahead: bool = True
    tie_weight: float = 0.0  # weight of uncertain deliveries in robust mode
    adm: np.ndarray = None
    plan: np.ndarray = None
    evaluations: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        n = self.weights.shape[0]
        if self.adm is None:
            self.adm = admissible_single_broadcaster(n)
        if self.mode not in ("robust", "stochastic"):
            raise SchedulerError(f"unknown network mode {self.mode!r}")
        if self.strategy not in ("commit", "greedy"):
            raise SchedulerError(f"unknown scheduling strategy {self.strategy!r}")

    @property
    def tau_eff(self) -> float:
        return 0.0 if self.mode == "robust" else self.tau

    def step(self, k: int, a):
        """Return (broadcast vector for step k, forecasts dict)."""
        robust = self.mode == "robust"
        if self.plan is None or self.strategy == "greedy":
            res = greedy_schedule(self.channel, a, self.weights, self.N, self.adm, k,
                                  robust=robust, tie_weight=self.tie_weight)
        else:
            res = commit_last_step(self.channel, a, self.weights, self.plan, self.adm,
                                   k, robust=robust, lookahead=self.lookahead,
                                   tie_weight=self.tie_weight)
        self.plan = res.plan
        self.evaluations.append(res.evaluations)
        fc = forecast_aoi(self.channel, a, self.plan, self.weights, self.tau_eff, k)
        return self.plan[0].copy(), fc
