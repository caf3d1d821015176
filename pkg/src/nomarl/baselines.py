"""Non-learning reference schedulers.

All schedulers return, per PRB, a list of M slot actions where a value in
``0..K-1`` is a UE id and ``K`` leaves the slot empty.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import CQI_REFERENCE_SINR_DB, EnvConfig, Observation, StepOutcome


def random_schedule(obs: Observation, M: int, rng: np.random.Generator) -> list:
    K = obs.K
    candidates = list(np.flatnonzero(obs.nonempty))
    actions = []
    for _ in range(M):
        pick = int(rng.integers(0, len(candidates) + 1))
        if pick == len(candidates):
            actions.append(K)
        else:
            actions.append(int(candidates.pop(pick)))
    return actions


def round_robin_schedule(obs: Observation, M: int, cursor: int) -> tuple:
    """Serve the next nonempty UEs in cyclic id order starting at ``cursor``."""
    K = obs.K
    nonempty = obs.nonempty
    actions = []
    for offset in range(K):
        if len(actions) == M:
            break
        ue = (cursor + offset) % K
        if nonempty[ue]:
            actions.append(ue)
    if actions:
        cursor = (actions[-1] + 1) % K
    return actions + [K] * (M - len(actions)), cursor


@dataclass
class PfState:
    avg_throughput: np.ndarray
    beta: float = 0.05
    floor: float = 1.0

    @classmethod
    def initial(cls, K: int, beta: float = 0.05, floor: float = 1.0) -> "PfState":
        return cls(avg_throughput=np.full(K, floor, dtype=float), beta=beta, floor=floor)

    def updated(self, served_bits) -> "PfState":
        avg = (1.0 - self.beta) * self.avg_throughput + self.beta * np.asarray(served_bits, dtype=float)
        return PfState(np.maximum(avg, self.floor), self.beta, self.floor)


def cqi_rate(cqi, config: EnvConfig) -> np.ndarray:
    """Interference-free rate estimate (bit/s) implied by a CQI report."""
    sinr_lin = 10.0 ** (CQI_REFERENCE_SINR_DB[np.asarray(cqi)] / 10.0)
    return config.prb_bandwidth_hz * np.log2(1.0 + sinr_lin)


def npfca_schedule(obs: Observation, pf: PfState, config: EnvConfig) -> list:
    """Proportional-fair channel-aware choice for one PRB.

    The throughput average is updated once per time step by the caller via
    ``PfState.updated``.
    """
    K, M = obs.K, config.M
    metric = cqi_rate(obs.cqi, config) / np.maximum(pf.avg_throughput, pf.floor)
    ues = np.flatnonzero(obs.nonempty)
    # stable sort keeps lower ids first on ties
    order = ues[np.argsort(-metric[ues], kind="stable")]
    actions = [int(u) for u in order[:M]]
    return actions + [K] * (M - len(actions))


class RandomScheduler:
    name = "random"

    def __init__(self, config: EnvConfig):
        self.config = config
        self.rng = np.random.default_rng(0)

    def reset(self, seed: int) -> None:
        self.rng = np.random.default_rng([int(seed), 0x5EED])

    def decide(self, obs: Observation) -> list:
        return random_schedule(obs, self.config.M, self.rng)

    def end_step(self, outcome: StepOutcome) -> None:
        pass


class RoundRobinScheduler:
    name = "rr"

    def __init__(self, config: EnvConfig):
        self.config = config
        self.cursor = 0

    def reset(self, seed: int) -> None:
        self.cursor = 0

    def decide(self, obs: Observation) -> list:
        actions, self.cursor = round_robin_schedule(obs, self.config.M, self.cursor)
        return actions

    def end_step(self, outcome: StepOutcome) -> None:
        pass


class NpfcaScheduler:
    name = "npfca"

    def __init__(self, config: EnvConfig, beta: float = 0.05, floor: float = 1.0):
        self.config = config
        self.beta = beta
        self.floor = floor
        self.pf = PfState.initial(config.K, beta, floor)

    def reset(self, seed: int) -> None:
        self.pf = PfState.initial(self.config.K, self.beta, self.floor)

    def decide(self, obs: Observation) -> list:
        return npfca_schedule(obs, self.pf, self.config)

    def end_step(self, outcome: StepOutcome) -> None:
        self.pf = self.pf.updated(outcome.transmitted_bits)


BASELINES = {"random": RandomScheduler, "rr": RoundRobinScheduler, "npfca": NpfcaScheduler}
