"""Training, evaluation and test protocols.

Training runs episodes of at most ``t_max`` steps on realizations drawn from
the training seed pool, stopping early once the cumulative episode reward
drops below ``w_cap``. Every PRB decision is stored as one replay transition
and one critic/actor update pair runs per time step. Evaluation uses four
fixed realizations, tests use 100 others; both run noise-free.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, List, Optional, Sequence

import numpy as np

from .env import ConfigError, EnvConfig, NomaUplinkEnv, Observation, actions_to_ues

ALLOCATION_STEP_BUDGET = 65_536


def test_horizon(N: int) -> int:
    """Time steps such that N PRB allocations per step fit the 65 536 budget."""
    return ALLOCATION_STEP_BUDGET // N


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 200
    t_max: int = 600
    w_cap: float = -80_000.0
    eval_every: int = 5
    eval_gate: Optional[float] = None
    eval_horizon: Optional[int] = None    # None -> test_horizon(N)
    test_horizon: Optional[int] = None    # None -> test_horizon(N)
    batch_size: int = 64
    replay_capacity: int = 100_000
    reward_assignment: str = "broadcast"  # broadcast | last_prb
    seed: int = 0
    eval_seeds: tuple = (10_000, 10_001, 10_002, 10_003)
    test_seeds: tuple = tuple(range(20_000, 20_100))
    train_seed_start: int = 1_000_000
    train_pool_size: int = 1_000_000

    def __post_init__(self):
        for name in ("episodes", "t_max", "eval_every", "batch_size", "replay_capacity", "train_pool_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"harness.{name} must be >= 1")
        for name in ("eval_horizon", "test_horizon"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"harness.{name} must be >= 1")
        if self.reward_assignment not in ("broadcast", "last_prb"):
            raise ConfigError("harness.reward_assignment must be 'broadcast' or 'last_prb'")
        if len(self.eval_seeds) == 0 or len(self.test_seeds) == 0:
            raise ConfigError("harness.eval_seeds and harness.test_seeds must be nonempty")
        check_seed_pools(self)

    @property
    def train_seeds(self) -> range:
        return range(self.train_seed_start, self.train_seed_start + self.train_pool_size)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown harness keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("eval_seeds", "test_seeds"):
            if key in d:
                d[key] = tuple(int(s) for s in d[key])
        return cls(**d)


def check_seed_pools(cfg: TrainConfig) -> None:
    ev, te = set(cfg.eval_seeds), set(cfg.test_seeds)
    if len(ev) != len(cfg.eval_seeds) or len(te) != len(cfg.test_seeds):
        raise ConfigError("harness seed pools contain duplicates")
    if ev & te:
        raise ConfigError("harness.eval_seeds and harness.test_seeds overlap")
    train = cfg.train_seeds
    clash = [s for s in ev | te if s in train]
    if clash:
        raise ConfigError(f"train seed pool overlaps eval/test seeds: {sorted(clash)[:5]}")


# -- replay -----------------------------------------------------------------

@dataclass
class Transition:
    state: Observation
    X: np.ndarray
    reward: float
    next_state: Observation
    terminal: bool


@dataclass
class Batch:
    sizes: np.ndarray
    ages: np.ndarray
    cqi: np.ndarray
    qi: np.ndarray
    prb: np.ndarray
    X: np.ndarray
    reward: np.ndarray
    next_sizes: np.ndarray
    next_ages: np.ndarray
    next_cqi: np.ndarray
    next_qi: np.ndarray
    next_prb: np.ndarray
    terminal: np.ndarray

    def __len__(self):
        return len(self.reward)


class ReplayMemory:
    """Fixed-capacity FIFO ring of transitions stored column-wise."""

    def __init__(self, capacity: int, K: int, L: int, M: int):
        self.capacity = int(capacity)
        self.size = 0
        self._next = 0
        C = self.capacity
        self._d = {
            "sizes": np.zeros((C, K, L), dtype=np.int64),
            "ages": np.zeros((C, K, L), dtype=np.int64),
            "cqi": np.zeros((C, K), dtype=np.int64),
            "qi": np.zeros((C, K), dtype=np.int64),
            "prb": np.zeros(C, dtype=np.int64),
            "X": np.zeros((C, M, K + 1)),
            "reward": np.zeros(C),
            "next_sizes": np.zeros((C, K, L), dtype=np.int64),
            "next_ages": np.zeros((C, K, L), dtype=np.int64),
            "next_cqi": np.zeros((C, K), dtype=np.int64),
            "next_qi": np.zeros((C, K), dtype=np.int64),
            "next_prb": np.zeros(C, dtype=np.int64),
            "terminal": np.zeros(C),
        }

    def __len__(self):
        return self.size

    def push(self, tr: Transition) -> None:
        i = self._next
        d = self._d
        s, s2 = tr.state, tr.next_state
        d["sizes"][i], d["ages"][i], d["cqi"][i], d["qi"][i], d["prb"][i] = (
            s.sizes, s.ages, s.cqi, s.qi, s.prb_index)
        d["next_sizes"][i], d["next_ages"][i], d["next_cqi"][i], d["next_qi"][i], d["next_prb"][i] = (
            s2.sizes, s2.ages, s2.cqi, s2.qi, s2.prb_index)
        d["X"][i] = tr.X
        d["reward"][i] = tr.reward
        d["terminal"][i] = float(tr.terminal)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _slot_order(self) -> np.ndarray:
        """Storage slots from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def get(self, idx) -> Batch:
        slots = self._slot_order()[np.asarray(idx)]
        return Batch(**{k: v[slots] for k, v in self._d.items()})

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} transitions from {self.size}")
        return self.get(rng.choice(self.size, size=batch_size, replace=False))


# -- episodes -----------------------------------------------------------------

def early_stop_index(rewards: Sequence[float], w_cap: float, t_max: int) -> int:
    """Steps executed before stopping: first t with cumulative reward < w_cap, else t_max."""
    total = 0.0
    for t, r in enumerate(rewards[:t_max], start=1):
        total += r
        if total < w_cap:
            return t
    return t_max


@dataclass
class EpisodeReport:
    reward: float
    t_stop: int
    updates: int = 0
    critic_loss: float = float("nan")
    mean_q: float = float("nan")
    rewards: List[float] = field(default_factory=list)


def run_training_episode(env, agent, replay: ReplayMemory, cfg: TrainConfig, seed: int,
                         rng: np.random.Generator) -> EpisodeReport:
    env.reset(seed)
    N, K = env.config.N, env.config.K
    total = 0.0
    rewards = []
    t_stop = cfg.t_max
    updates, losses, qs = 0, [], []
    for t in range(1, cfg.t_max + 1):
        states, decisions = [], []
        for n in range(N):
            obs = env.observe(n)
            X, actions = agent.actor_decide_prb(obs, explore=True)
            env.allocate_prb(n, actions_to_ues(actions, K))
            states.append(obs)
            decisions.append(X)
        outcome = env.finish_step()
        total += outcome.reward
        rewards.append(outcome.reward)
        stop = outcome.terminal or t == cfg.t_max or total < cfg.w_cap
        next_states = states[1:] + [env.observe(0)]
        for n in range(N):
            share = outcome.reward
            if cfg.reward_assignment == "last_prb" and n < N - 1:
                share = 0.0
            replay.push(Transition(states[n], decisions[n], share, next_states[n],
                                   bool(outcome.terminal) and n == N - 1))
        if len(replay) >= cfg.batch_size:
            loss, q = agent.update(replay.sample(cfg.batch_size, rng))
            losses.append(loss)
            qs.append(q)
            updates += 1
        if stop:
            t_stop = t
            break
    return EpisodeReport(total, t_stop, updates,
                         float(np.mean(losses)) if losses else float("nan"),
                         float(np.mean(qs)) if qs else float("nan"), rewards)


def run_policy_episode(env_config: EnvConfig, scheduler, seed: int, horizon: int,
                       trace: Optional[list] = None) -> float:
    """Cumulative reward of a scheduler on one realization (no learning)."""
    env = NomaUplinkEnv(env_config.with_(t_max=horizon))
    env.reset(seed)
    scheduler.reset(seed)
    K = env_config.K
    for _ in range(horizon):
        for n in range(env_config.N):
            actions = scheduler.decide(env.observe(n))
            env.allocate_prb(n, actions_to_ues(actions, K))
        outcome = env.finish_step()
        scheduler.end_step(outcome)
        if trace is not None:
            trace.append({"t": env.state.t, "reward": outcome.reward,
                          "buffered_bits": env.buffered_bits().copy()})
    return env.state.cumulative_reward


def make_scheduler(name: str, env_config: EnvConfig, baselines=None, agent=None, seed: int = 0):
    from .baselines import NpfcaScheduler, RandomScheduler, RoundRobinScheduler
    if name == "random":
        return RandomScheduler(env_config)
    if name == "rr":
        return RoundRobinScheduler(env_config)
    if name == "npfca":
        if baselines is None:
            return NpfcaScheduler(env_config)
        return NpfcaScheduler(env_config, baselines.pf_beta, baselines.pf_floor)
    if name == "drl":
        if agent is None:
            raise ValueError("drl scheduler needs a trained agent")
        return agent.inference_copy(seed)
    raise ValueError(f"unknown agent {name!r}")


def _one_realization(args):
    name, env_config, baselines, agent, seed, horizon = args
    scheduler = make_scheduler(name, env_config, baselines, agent, seed)
    return run_policy_episode(env_config, scheduler, seed, horizon)


def run_realizations(name: str, env_config: EnvConfig, seeds: Sequence[int], horizon: int,
                     baselines=None, agent=None, jobs: int = 1) -> List[float]:
    """Cumulative reward per seed, in seed order regardless of ``jobs``."""
    tasks = [(name, env_config, baselines, agent, int(s), horizon) for s in seeds]
    if jobs <= 1 or len(tasks) <= 1:
        return [_one_realization(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_one_realization, tasks))


def should_evaluate(episode: int, train_reward: float, cfg: TrainConfig) -> bool:
    if episode % cfg.eval_every != 0:
        return False
    return cfg.eval_gate is None or train_reward > cfg.eval_gate


def evaluate_agent(agent, env_config: EnvConfig, cfg: TrainConfig, jobs: int = 1) -> float:
    horizon = cfg.eval_horizon or test_horizon(env_config.N)
    rewards = run_realizations("drl", env_config, cfg.eval_seeds, horizon, agent=agent, jobs=jobs)
    return float(np.mean(rewards))


# -- test protocol --------------------------------------------------------------

def summarize(rewards: Sequence[float]) -> dict:
    """Mean, median, quartiles and 1.5-IQR outliers (box-plot convention)."""
    r = np.asarray(rewards, dtype=float)
    q1, med, q3 = np.percentile(r, [25, 50, 75])
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    outliers = [int(i) for i in np.flatnonzero((r < lo) | (r > hi))]
    return {"n": int(r.size), "mean": float(r.mean()), "median": float(med), "q1": float(q1),
            "q3": float(q3), "min": float(r.min()), "max": float(r.max()),
            "outliers": outliers}


@dataclass
class TestResult:
    agent_name: str
    seeds: List[int]
    rewards: List[float]
    horizon: int

    @property
    def summary(self) -> dict:
        return summarize(self.rewards)


def test_agent(name: str, env_config: EnvConfig, cfg: TrainConfig, baselines=None, agent=None,
               seeds: Optional[Sequence[int]] = None, jobs: int = 1) -> TestResult:
    seeds = list(cfg.test_seeds if seeds is None else seeds)
    horizon = cfg.test_horizon or test_horizon(env_config.N)
    rewards = run_realizations(name, env_config, seeds, horizon, baselines, agent, jobs)
    return TestResult(name, seeds, [float(r) for r in rewards], horizon)


# pytest would otherwise try to collect these
test_agent.__test__ = False
test_horizon.__test__ = False
TestResult.__test__ = False


# -- training loop ----------------------------------------------------------------

@dataclass
class EpisodeRecord:
    episode: int
    train_reward: float
    t_stop: int
    eval_reward: Optional[float] = None
    wall_ms: float = 0.0

    def to_json(self) -> dict:
        d = {"episode": self.episode, "train_reward": self.train_reward, "t_stop": self.t_stop}
        if self.eval_reward is not None:
            d["eval_reward"] = self.eval_reward
        return d


def train_agent(env_config: EnvConfig, agent, cfg: TrainConfig,
                on_episode: Optional[Callable[[EpisodeRecord], None]] = None, jobs: int = 1):
    """Train ``agent`` in place; returns the list of EpisodeRecords."""
    import time

    check_seed_pools(cfg)
    env = NomaUplinkEnv(env_config.with_(t_max=cfg.t_max))
    replay = ReplayMemory(cfg.replay_capacity, env_config.K, env_config.L, env_config.M)
    rng = np.random.default_rng([cfg.seed, 7])
    history = []
    for episode in range(1, cfg.episodes + 1):
        start = time.perf_counter()
        seed = int(cfg.train_seed_start + rng.integers(0, cfg.train_pool_size))
        report = run_training_episode(env, agent, replay, cfg, seed, rng)
        record = EpisodeRecord(episode, report.reward, report.t_stop)
        if should_evaluate(episode, report.reward, cfg):
            record.eval_reward = evaluate_agent(agent, env_config, cfg, jobs)
        record.wall_ms = (time.perf_counter() - start) * 1000.0
        history.append(record)
        if on_episode is not None:
            on_episode(record)
    return history


def horizon_for(env_config: EnvConfig, cfg: TrainConfig, kind: str = "test") -> int:
    value = cfg.test_horizon if kind == "test" else cfg.eval_horizon
    return value or test_horizon(env_config.N)


__all__ = [
    "ALLOCATION_STEP_BUDGET", "Batch", "EpisodeRecord", "EpisodeReport", "ReplayMemory", "TestResult",
    "TrainConfig", "Transition", "early_stop_index", "evaluate_agent", "make_scheduler",
    "run_policy_episode", "run_realizations", "run_training_episode", "should_evaluate", "summarize",
    "test_agent", "test_horizon", "train_agent",
]
