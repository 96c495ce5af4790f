"""Subsystem models, neighbor-augmented models and neighbor state estimation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ModelError(ValueError):
    pass


@dataclass
class SubsystemModel:
    """x+ = A x + B u with symmetric input bound |u| <= u_bound."""

    A: np.ndarray
    B: np.ndarray
    u_bound: float

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.asarray(self.B, dtype=float).reshape(self.A.shape[0], -1)
        if self.A.shape[0] != self.A.shape[1]:
            raise ModelError("A must be square")
        if self.u_bound <= 0:
            raise ModelError("input bound must be positive")

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def nu(self) -> int:
        return self.B.shape[1]

    def step(self, x, u):
        return self.A @ x + self.B @ np.atleast_1d(u)


@dataclass
class AugmentedModel:
    """State [x_own; x_nbr_1; ...]; B drives the own block, B1 the neighbor blocks.

    B2 equals B1: deviations enter where the neighbor inputs do.
    """

    A: np.ndarray
    B: np.ndarray
    B1: np.ndarray
    nx_own: int
    nbr_slices: list

    @property
    def B2(self) -> np.ndarray:
        return self.B1

    @property
    def nx(self) -> int:
        return self.A.shape[0]


def build_augmented_model(own: SubsystemModel, neighbors: list) -> AugmentedModel:
    mats = [own.A] + [m.A for m in neighbors]
    n = sum(M.shape[0] for M in mats)
    A = np.zeros((n, n))
    pos = 0
    slices = []
    for M in mats:
        A[pos:pos + M.shape[0], pos:pos + M.shape[0]] = M
        slices.append(slice(pos, pos + M.shape[0]))
        pos += M.shape[0]
    B = np.zeros((n, own.nu))
    B[slices[0]] = own.B
    nu_n = sum(m.nu for m in neighbors)
    B1 = np.zeros((n, nu_n))
    col = 0
    for sl, m in zip(slices[1:], neighbors):
        B1[sl, col:col + m.nu] = m.B
        col += m.nu
    return AugmentedModel(A, B, B1, own.nx, slices[1:])


def estimate_neighbor_state(model: SubsystemModel, x_stamp, inputs, age: int):
    """Roll the neighbor model ``age`` steps from its stamped state using its
    communicated nominal inputs."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.nu)
    if age < 0:
        raise ModelError("age must be nonnegative")
    if inputs.shape[0] < age:
        raise ModelError(f"communicated inputs cover {inputs.shape[0]} steps, need {age}")
    x = np.asarray(x_stamp, dtype=float)
    for t in range(age):
        x = model.step(x, inputs[t])
    return x
