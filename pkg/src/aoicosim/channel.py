"""Markov-modulated Bernoulli link model.

Each chain has a row-stochastic transition matrix ``T`` and a success
probability per state. A chain may drive several links at once, in which case
``q`` has one column per link. The chain state is observable, so all
expectations start from a unit vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STOCH_TOL = 1e-9


class ChannelError(ValueError):
    pass


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by ``seed XOR stream``."""
    key = (int(seed) ^ int(stream)) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(key))


@dataclass
class LinkChain:
    """Discrete-time Markov chain with per-state success probabilities."""

    q: np.ndarray
    T: np.ndarray
    state: int = 0
    observable: bool = True  # otherwise sigma is propagated by T

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        self.q = q[:, None] if q.ndim == 1 else q
        self.T = np.atleast_2d(np.asarray(self.T, dtype=float))
        m = self.q.shape[0]
        if self.T.shape != (m, m):
            raise ChannelError(f"transition matrix must be {m}x{m}, got {self.T.shape}")
        if np.any(self.q < 0) or np.any(self.q > 1):
            raise ChannelError("success probabilities must lie in [0, 1]")
        if np.any(self.T < 0):
            raise ChannelError("transition matrix has negative entries")
        if np.any(np.abs(self.T.sum(axis=1) - 1.0) > STOCH_TOL):
            raise ChannelError("transition matrix row not stochastic")
        if not 0 <= self.state < m:
            raise ChannelError(f"initial state {self.state} out of range")
        self._sigma = np.eye(m)[self.state]

    @property
    def n_states(self) -> int:
        return self.q.shape[0]

    @property
    def n_links(self) -> int:
        return self.q.shape[1]

    def sigma(self) -> np.ndarray:
        if self.observable:
            return np.eye(self.n_states)[self.state]
        return self._sigma.copy()

    def step(self, rng: np.random.Generator) -> int:
        row = self.T[self.state]
        if np.count_nonzero(row) == 1:
            self.state = int(np.flatnonzero(row)[0])
            rng.random()  # keep the stream aligned with stochastic chains
        else:
            self.state = int(np.searchsorted(np.cumsum(row), rng.random(), side="right"))
            self.state = min(self.state, self.n_states - 1)
        self._sigma = self._sigma @ self.T
        return self.state

    def success_prob(self, link: int = 0) -> float:
        return float(self.q[self.state, link])

    def distribution(self, offset: int) -> np.ndarray:
        if offset < 0:
            raise ChannelError("offset must be nonnegative")
        return self.sigma() @ np.linalg.matrix_power(self.T, offset)

    def mean_success_at(self, offset: int, link: int = 0) -> float:
        """E[p_{k+offset}] given the current state."""
        return float(self.distribution(offset) @ self.q[:, link])

    def product_expectation(self, offsets, link: int = 0) -> float:
        """E[prod_i p_{k+offsets[i]}] for strictly increasing offsets."""
        offs = [int(o) for o in offsets]
        if not offs:
            return 1.0
        if offs[0] < 0 or any(b <= a for a, b in zip(offs, offs[1:])):
            raise ChannelError("offsets must be nonnegative and strictly increasing")
        row = self.sigma()
        prev = 0
        for o in offs:
            row = row @ np.linalg.matrix_power(self.T, o - prev)
            row = row * self.q[:, link]
            prev = o
        return float(row.sum())


def step_chain(chain: LinkChain, rng: np.random.Generator) -> LinkChain:
    chain.step(rng)
    return chain


def draw_transmission(chain: LinkChain, scheduled: bool, rng: np.random.Generator,
                      link: int = 0) -> int:
    """Bernoulli success of one scheduled transmission in the current state.

    A uniform is consumed even when nothing is scheduled.
    """
    u = rng.random()
    return int(bool(scheduled) and u < chain.success_prob(link))


@dataclass
class Outage:
    """Forced failures of one link on steps [start, start + length)."""

    link: tuple
    start: int
    length: int

    def covers(self, k: int) -> bool:
        return self.start <= k < self.start + self.length


@dataclass
class ChannelModel:
    """Maps directed links (sender, receiver) to a chain column.

    Links that are not listed never deliver. Outages are known in advance and
    are therefore visible to forecasts.
    """

    chains: list
    links: dict  # (sender, receiver) -> (chain index, column)
    outages: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self._rngs = [make_rng(self.seed, 2 * c + 1) for c in range(len(self.chains))]
        self._link_rngs = {lk: make_rng(self.seed, 1000 + 31 * lk[0] + lk[1])
                           for lk in sorted(self.links)}

    def _blocked(self, link, k) -> bool:
        return any(o.link == link and o.covers(k) for o in self.outages)

    def mean_success(self, link, offset: int, k: int) -> float:
        """Expected success probability ``offset`` steps after step ``k``."""
        if link not in self.links or self._blocked(link, k + offset):
            return 0.0
        c, col = self.links[link]
        return self.chains[c].mean_success_at(offset, col)

    def current_success(self, link, k: int) -> float:
        return self.mean_success(link, 0, k)

    def draw(self, k: int, scheduled: set) -> dict:
        """Realize one step: Bernoulli draws for every link, then advance chains.

        A uniform is consumed for every link every step so the realized
        channel does not depend on the schedule.
        """
        out = {}
        for link in sorted(self.links):
            u = self._link_rngs[link].random()
            ok = u < self.current_success(link, k)
            out[link] = bool(ok and link[0] in scheduled)
        for chain, rng in zip(self.chains, self._rngs):
            chain.step(rng)
        return out
