import numpy as np
import pytest

from nomarl.env import EnvConfig, NomaUplinkEnv, Observation


@pytest.fixture
def small_config():
    return EnvConfig(K=4, N=2, M=2, L=4, t_max=50)


@pytest.fixture
def small_env(small_config):
    env = NomaUplinkEnv(small_config)
    env.reset(0)
    return env


def make_obs(sizes, ages=None, cqi=None, qi=None, prb_index=0) -> Observation:
    sizes = np.asarray(sizes, dtype=np.int64)
    K = sizes.shape[0]
    return Observation(
        sizes=sizes,
        ages=np.zeros_like(sizes) if ages is None else np.asarray(ages, dtype=np.int64),
        cqi=np.full(K, 7, dtype=np.int64) if cqi is None else np.asarray(cqi, dtype=np.int64),
        qi=np.ones(K, dtype=np.int64) if qi is None else np.asarray(qi, dtype=np.int64),
        prb_index=prb_index)


def random_obs(rng, K, L, prb_index=0, p_empty=0.4) -> Observation:
    counts = np.where(rng.random(K) < p_empty, 0, rng.integers(1, L + 1, size=K))
    sizes = np.zeros((K, L), dtype=np.int64)
    ages = np.zeros((K, L), dtype=np.int64)
    for k, c in enumerate(counts):
        sizes[k, :c] = rng.integers(1, 3000, size=c)
        ages[k, :c] = np.sort(rng.integers(0, 400, size=c))[::-1]
    return Observation(sizes=sizes, ages=ages, cqi=rng.integers(0, 16, size=K),
                       qi=rng.integers(1, 5, size=K), prb_index=prb_index)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def record_acceptance(number, title, ok, detail=""):
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
