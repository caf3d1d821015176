"""Uplink multi-carrier NOMA environment.

Each time step the scheduler fills the M NOMA slots of every PRB with UEs
(or leaves them empty). UEs on the same PRB are decoded in slot order and
every decoded UE adds its received power to the interference seen by the
following ones. After all PRBs are processed the penalty is the number of
buffered bits that exceeded their packet delay budget plus the bits dropped
because of full buffers. UEs then move and new packets arrive.

UE ids and PRB indices are 0-based. In action vectors the value ``K`` means
"leave the NOMA slot empty".
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
THERMAL_NOISE_DBM_PER_HZ = -174.0

# Lower SINR edge (dB) of CQI 1..15; CQI 0 below the first entry.
CQI_THRESHOLDS_DB = np.array(
    [16.0, 18.0, 20.0, 22.0, 24.0, 26.0, 28.0, 30.0,
     32.0, 34.0, 36.0, 38.0, 40.0, 42.0, 44.0])
# Representative SINR per CQI used by channel-aware schedulers.
CQI_REFERENCE_SINR_DB = np.concatenate([[14.0], CQI_THRESHOLDS_DB])


class ConfigError(ValueError):
    """Raised for invalid environment or run configuration."""


@dataclass(frozen=True)
class QosProfile:
    qi: int
    pdb_steps: int
    gbr_bits_per_step: float
    packet_bits: int
    period_steps: int = 0          # >0: periodic arrivals
    arrival_prob: float = 0.0      # used when period_steps == 0

    def validate(self) -> None:
        if self.pdb_steps < 1:
            raise ConfigError(f"qos[{self.qi}].pdb_steps must be >= 1")
        if self.packet_bits <= 0:
            raise ConfigError(f"qos[{self.qi}].packet_bits must be > 0")
        if self.period_steps < 0:
            raise ConfigError(f"qos[{self.qi}].period_steps must be >= 0")
        if self.period_steps == 0 and not 0.0 <= self.arrival_prob <= 1.0:
            raise ConfigError(f"qos[{self.qi}].arrival_prob must be in [0, 1]")


DEFAULT_QOS = (
    QosProfile(qi=1, pdb_steps=100, gbr_bits_per_step=376 / 20, packet_bits=376, period_steps=20),
    QosProfile(qi=2, pdb_steps=150, gbr_bits_per_step=8000 / 33, packet_bits=8000, period_steps=33),
    QosProfile(qi=3, pdb_steps=30, gbr_bits_per_step=256 / 10, packet_bits=256, period_steps=10),
    QosProfile(qi=4, pdb_steps=300, gbr_bits_per_step=0.0, packet_bits=48000, arrival_prob=0.02),
)


@dataclass(frozen=True)
class EnvConfig:
    K: int = 20
    N: int = 10
    M: int = 2
    L: int = 8
    bandwidth_hz: float = 10e6
    tx_power_dbm: float = 13.0
    carrier_hz: float = 2e9
    noise_dbm: Optional[float] = None   # None: thermal noise over B/N
    constant_interference_dbm: float = -105.0
    tti_seconds: float = 1e-3
    mobility_dt_s: float = 1.0
    t_max: int = 600
    area_m: float = 1000.0
    min_distance_m: float = 1.0
    speed_mean_mps: float = 1.2
    speed_std_mps: float = 0.5
    qos: tuple = DEFAULT_QOS

    def __post_init__(self):
        for name in ("K", "N", "M", "L", "t_max"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name in ("bandwidth_hz", "carrier_hz", "tti_seconds", "area_m", "min_distance_m"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.speed_std_mps < 0 or self.mobility_dt_s < 0:
            raise ConfigError("speed_std_mps and mobility_dt_s must be >= 0")
        qis = sorted(p.qi for p in self.qos)
        if qis != [1, 2, 3, 4]:
            raise ConfigError(f"qos must define exactly QIs 1..4, got {qis}")
        for p in self.qos:
            p.validate()

    @property
    def prb_bandwidth_hz(self) -> float:
        return self.bandwidth_hz / self.N

    @property
    def noise_power_dbm(self) -> float:
        if self.noise_dbm is not None:
            return self.noise_dbm
        return THERMAL_NOISE_DBM_PER_HZ + 10.0 * math.log10(self.prb_bandwidth_hz)

    def profile(self, qi: int) -> QosProfile:
        for p in self.qos:
            if p.qi == qi:
                return p
        raise ConfigError(f"unknown QI {qi}")

    def pdb_table(self) -> np.ndarray:
        """PDB indexed by QI (index 0 unused)."""
        table = np.zeros(5, dtype=np.int64)
        for p in self.qos:
            table[p.qi] = p.pdb_steps
        return table

    @property
    def max_packet_bits(self) -> int:
        return max(p.packet_bits for p in self.qos)

    def with_(self, **changes) -> "EnvConfig":
        return replace(self, **changes)


def dbm_to_mw(dbm):
    return 10.0 ** (np.asarray(dbm, dtype=float) / 10.0)


def mw_to_dbm(mw):
    return 10.0 * np.log10(mw)


def fspl_db(distance_m, carrier_hz: float):
    return 20.0 * np.log10(4.0 * np.pi * np.asarray(distance_m, dtype=float) * carrier_hz / SPEED_OF_LIGHT)


def sinr(prx_mw, noise_mw, zeta_mw, xi_mw):
    """Linear SINR; all powers in mW."""
    return prx_mw / (noise_mw + zeta_mw + xi_mw)


def achievable_rate(sinr_value, config: EnvConfig):
    """Shannon rate in bit/s on one PRB."""
    return config.prb_bandwidth_hz * np.log2(1.0 + np.asarray(sinr_value, dtype=float))


def deliverable_bits(sinr_value, config: EnvConfig) -> int:
    return int(math.floor(float(achievable_rate(sinr_value, config)) * config.tti_seconds))


def sinr_db_to_cqi(sinr_db):
    return np.searchsorted(CQI_THRESHOLDS_DB, np.asarray(sinr_db, dtype=float), side="right")


@dataclass
class Observation:
    """CQI and buffer state of all UEs as seen before allocating one PRB."""
    sizes: np.ndarray       # (K, L) bits, 0-padded
    ages: np.ndarray        # (K, L) steps, 0-padded
    cqi: np.ndarray         # (K,)
    qi: np.ndarray          # (K,)
    prb_index: int

    @property
    def K(self) -> int:
        return self.sizes.shape[0]

    @property
    def nonempty(self) -> np.ndarray:
        return self.sizes[:, 0] > 0

    def per_ue(self) -> np.ndarray:
        """(K, 2L+2) raw feature matrix: sizes, ages, cqi, qi."""
        return np.hstack([self.sizes, self.ages, self.cqi[:, None], self.qi[:, None]]).astype(float)


@dataclass
class StepOutcome:
    reward: float
    transmitted_bits: np.ndarray
    terminal: bool
    overdue_bits: int = 0
    dropped_bits: int = 0


@dataclass
class EnvState:
    config: EnvConfig
    positions: np.ndarray        # (K, 2)
    velocities: np.ndarray       # (K, 2)
    qi: np.ndarray               # (K,)
    sizes: np.ndarray            # (K, L)
    ages: np.ndarray             # (K, L)
    counts: np.ndarray           # (K,)
    phases: np.ndarray           # (K,) periodic traffic offsets
    t: int = 0
    cumulative_reward: float = 0.0
    pending_drop_bits: int = 0
    step_tx_bits: np.ndarray = field(default=None)
    traffic_rng: np.random.Generator = field(default=None, repr=False)


class NomaUplinkEnv:
    """Seedable single-cell uplink MC-NOMA simulator."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state: Optional[EnvState] = None
        self._noise_mw = float(dbm_to_mw(config.noise_power_dbm))
        self._zeta_mw = float(dbm_to_mw(config.constant_interference_dbm))
        self._pdb = config.pdb_table()
        self._bs = np.array([config.area_m / 2.0, config.area_m / 2.0])
        self._prx_cache = None

    # -- lifecycle -----------------------------------------------------
    def reset(self, seed: int) -> EnvState:
        cfg = self.config
        placement, mobility, traffic = (
            np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(3))
        positions = placement.uniform(0.0, cfg.area_m, size=(cfg.K, 2))
        qi = placement.integers(1, 5, size=cfg.K)
        speed = np.clip(mobility.normal(cfg.speed_mean_mps, cfg.speed_std_mps, size=cfg.K), 0.0, None)
        heading = mobility.uniform(0.0, 2.0 * np.pi, size=cfg.K)
        velocities = np.stack([speed * np.cos(heading), speed * np.sin(heading)], axis=1)
        periods = np.array([cfg.profile(int(q)).period_steps for q in qi])
        phases = np.array([traffic.integers(0, p) if p > 0 else 0 for p in periods])
        self.state = EnvState(
            config=cfg, positions=positions, velocities=velocities, qi=qi,
            sizes=np.zeros((cfg.K, cfg.L), dtype=np.int64),
            ages=np.zeros((cfg.K, cfg.L), dtype=np.int64),
            counts=np.zeros(cfg.K, dtype=np.int64), phases=phases,
            step_tx_bits=np.zeros(cfg.K, dtype=np.int64), traffic_rng=traffic)
        self._prx_cache = None
        self.generate_packets()
        return self.state

    @property
    def done(self) -> bool:
        return self.state.t >= self.config.t_max

    # -- channel ---------------------------------------------------------
    def distances(self) -> np.ndarray:
        d = np.linalg.norm(self.state.positions - self._bs, axis=1)
        return np.maximum(d, self.config.min_distance_m)

    def rx_power_dbm(self, ue: Optional[int] = None):
        if self._prx_cache is None:
            self._prx_cache = self.config.tx_power_dbm - fspl_db(self.distances(), self.config.carrier_hz)
        return self._prx_cache if ue is None else float(self._prx_cache[ue])

    def reference_sinr_db(self) -> np.ndarray:
        prx = dbm_to_mw(self.rx_power_dbm())
        return mw_to_dbm(sinr(prx, self._noise_mw, self._zeta_mw, 0.0))

    def compute_cqi(self, ue: Optional[int] = None):
        cqi = sinr_db_to_cqi(self.reference_sinr_db())
        return cqi if ue is None else int(cqi[ue])

    # -- observation -------------------------------------------------------
    def observe(self, prb_index: int) -> Observation:
        if not 0 <= prb_index < self.config.N:
            raise IndexError(f"prb_index {prb_index} outside [0, {self.config.N})")
        s = self.state
        return Observation(sizes=s.sizes.copy(), ages=s.ages.copy(), cqi=self.compute_cqi(),
                           qi=s.qi.copy(), prb_index=prb_index)

    def buffered_bits(self) -> np.ndarray:
        return self.state.sizes.sum(axis=1)

    # -- allocation --------------------------------------------------------
    def allocate_prb(self, prb_index: int, chosen: Sequence[int]) -> np.ndarray:
        """Serve ``chosen`` UEs on one PRB in the given order; return per-UE bits sent."""
        cfg = self.config
        chosen = [int(u) for u in chosen]
        if len(chosen) > cfg.M:
            raise ValueError(f"at most {cfg.M} UEs per PRB, got {len(chosen)}")
        if len(set(chosen)) != len(chosen):
            raise ValueError(f"duplicate UE in allocation {chosen}")
        if any(u < 0 or u >= cfg.K for u in chosen):
            raise ValueError(f"invalid UE id in allocation {chosen}")
        if not 0 <= prb_index < cfg.N:
            raise IndexError(f"prb_index {prb_index} outside [0, {cfg.N})")
        sent = np.zeros(cfg.K, dtype=np.int64)
        prx_all = dbm_to_mw(self.rx_power_dbm())
        xi = 0.0
        for ue in chosen:
            prx = float(prx_all[ue])
            bits = deliverable_bits(sinr(prx, self._noise_mw, self._zeta_mw, xi), cfg)
            sent[ue] = self._dequeue(ue, bits)
            xi += prx
        self.state.step_tx_bits += sent
        return sent

    def _dequeue(self, ue: int, budget: int) -> int:
        s = self.state
        sizes, ages = s.sizes[ue], s.ages[ue]
        sent = 0
        removed = 0
        count = int(s.counts[ue])
        while removed < count and budget > 0:
            take = min(budget, int(sizes[removed]))
            sizes[removed] -= take
            budget -= take
            sent += take
            if sizes[removed] == 0:
                removed += 1
        if removed:
            keep = count - removed
            sizes[:keep] = sizes[removed:count]
            ages[:keep] = ages[removed:count]
            sizes[keep:] = 0
            ages[keep:] = 0
            s.counts[ue] = keep
        return sent

    # -- end of step -------------------------------------------------------
    def compute_penalty(self) -> tuple:
        """Return (reward, overdue_bits, dropped_bits) for the current buffers."""
        s = self.state
        pdb = self._pdb[s.qi][:, None]
        overdue = int(s.sizes[(s.ages > pdb) & (s.sizes > 0)].sum())
        dropped = int(s.pending_drop_bits)
        return -float(overdue + dropped), overdue, dropped

    def move_ues(self) -> None:
        s = self.state
        area = self.config.area_m
        pos = s.positions + s.velocities * self.config.mobility_dt_s
        vel = s.velocities.copy()
        # a single reflection per axis suffices while speed * dt < area
        low, high = pos < 0.0, pos > area
        pos = np.where(low, -pos, pos)
        pos = np.where(high, 2.0 * area - pos, pos)
        vel = np.where(low | high, -vel, vel)
        s.positions = np.clip(pos, 0.0, area)
        s.velocities = vel
        self._prx_cache = None

    def generate_packets(self) -> int:
        """Append arrivals for the current time index; return bits dropped."""
        s = self.state
        cfg = self.config
        draws = s.traffic_rng.random(cfg.K)
        dropped = 0
        for ue in range(cfg.K):
            prof = cfg.profile(int(s.qi[ue]))
            if prof.period_steps > 0:
                arrives = (s.t + s.phases[ue]) % prof.period_steps == 0
            else:
                arrives = draws[ue] < prof.arrival_prob
            if not arrives:
                continue
            c = int(s.counts[ue])
            if c >= cfg.L:
                dropped += prof.packet_bits
                continue
            s.sizes[ue, c] = prof.packet_bits
            s.ages[ue, c] = 0
            s.counts[ue] = c + 1
        s.pending_drop_bits += dropped
        return dropped

    def finish_step(self) -> StepOutcome:
        s = self.state
        reward, overdue, dropped = self.compute_penalty()
        s.pending_drop_bits = 0
        tx = s.step_tx_bits
        s.step_tx_bits = np.zeros(self.config.K, dtype=np.int64)
        s.cumulative_reward += reward
        occupied = s.sizes > 0
        s.ages[occupied] += 1
        s.t += 1
        self.move_ues()
        self.generate_packets()
        return StepOutcome(reward=reward, transmitted_bits=tx, terminal=self.done,
                           overdue_bits=overdue, dropped_bits=dropped)

    def step(self, allocations: Sequence[Sequence[int]]) -> StepOutcome:
        """Apply one allocation list per PRB (in PRB order) and advance time."""
        if len(allocations) != self.config.N:
            raise ValueError(f"expected {self.config.N} PRB allocations, got {len(allocations)}")
        for n, chosen in enumerate(allocations):
            self.allocate_prb(n, chosen)
        return self.finish_step()


def actions_to_ues(actions: Sequence[int], K: int) -> list:
    """Drop leave-empty entries from a slot action vector."""
    return [int(a) for a in actions if a != K]


def write_trace_csv(path, rows: Sequence[dict], K: int, header_lines: Sequence[str] = ()) -> None:
    """Write a per-step trace with columns t, reward, buffered_bits_0..K-1."""
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["t", "reward"] + [f"buffered_bits_{k}" for k in range(K)])
        for row in rows:
            writer.writerow([row["t"], row["reward"]] + [int(b) for b in row["buffered_bits"]])
