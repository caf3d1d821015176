import numpy as np
import pytest
from conftest import make_obs, random_obs
from hypothesis import given, settings
from hypothesis import strategies as st

from nomarl.agent import (Agent, AgentConfig, PermState, age_cap, build_input, input_width,
                          mask_and_renormalize, split_input_grad, traffic_mask)
from nomarl.env import ConfigError, EnvConfig
from nomarl.harness import ReplayMemory, Transition

SMALL_ENV = EnvConfig(K=4, N=2, M=2, L=4)
SMALL_AGENT = AgentConfig(enn_hidden=(8, 6), hidden_width=16, hidden_layers=2, dropout=0.0)


def small_agent(seed=0, **changes):
    cfg = AgentConfig(**{**SMALL_AGENT.__dict__, **changes})
    return Agent(SMALL_ENV, cfg, seed=seed)


def make_batch(rng, n, env=SMALL_ENV, reward=None, terminal=False):
    mem = ReplayMemory(n, env.K, env.L, env.M)
    for i in range(n):
        s = random_obs(rng, env.K, env.L, prb_index=int(rng.integers(env.N)))
        s2 = random_obs(rng, env.K, env.L, prb_index=int(rng.integers(env.N)))
        X = rng.dirichlet(np.ones(env.K + 1), size=env.M)
        r = -float(rng.integers(0, 3000)) if reward is None else reward
        mem.push(Transition(s, X, r, s2, terminal))
    return mem.get(np.arange(n))


# -- widths -------------------------------------------------------------------

@pytest.mark.parametrize("K,N,width", [(20, 10, 105), (32, 25, 165)])
def test_actor_widths(K, N, width):
    env = EnvConfig(K=K, N=N, M=2, L=8)
    agent = Agent(env, AgentConfig(hidden_width=8, hidden_layers=1))
    assert input_width(K, 2) == width
    assert agent.actor_input_width == width
    assert agent.actor_output_width == K + 1
    assert agent.critic.head.n_out == 1
    assert agent.actor.enns[1].n_in == 18 and agent.actor.enns[1].n_out == 3


@given(K=st.integers(1, 40), M=st.integers(1, 4))
def test_input_width_formula(K, M):
    assert input_width(K, M) == 3 * K + M * (K + 1) + 3


# -- preprocessing -------------------------------------------------------------------

def test_age_cap_examples():
    pdb = np.array([0, 100, 150, 30, 300])
    obs = make_obs([[10, 10, 0], [10, 0, 0]], ages=[[250, 50, 0], [20, 0, 0]], qi=[1, 3])
    capped = age_cap(obs, pdb)
    assert capped.ages.tolist() == [[100, 50, 0], [20, 0, 0]]


def test_mask_and_renormalize_examples():
    assert np.allclose(mask_and_renormalize([0.5, 0.3, 0.2], [1, 0, 1]), [5 / 7, 0, 2 / 7])
    x = np.array([0.1, 0.6, 0.3])
    assert np.allclose(mask_and_renormalize(x, [1, 1, 1]), x)
    assert mask_and_renormalize([0.4, 0.6, 0.0], [0, 0, 1]).tolist() == [0.0, 0.0, 1.0]


def test_traffic_mask():
    sizes = np.array([[5, 0], [0, 0], [3, 2]])
    assert traffic_mask(sizes).tolist() == [True, False, True, True]
    assert traffic_mask(sizes, enabled=False).tolist() == [True] * 4


def test_permutation_inverse():
    rng = np.random.default_rng(0)
    p = PermState.random(7, rng)
    assert np.array_equal(p.perm[p.inverse], np.arange(7))
    assert np.array_equal(p.inverse[p.perm], np.arange(7))


# -- encoders and input layout -------------------------------------------------------

def test_shared_encoder_per_qi():
    agent = small_agent()
    obs = make_obs([[400, 0, 0, 0]] * 4, ages=[[3, 0, 0, 0]] * 4, cqi=[5, 5, 5, 5], qi=[2, 2, 3, 1])
    codes = agent.compress_ue_state(obs)
    assert codes.shape == (4, 3)
    assert np.array_equal(codes[0], codes[1])
    assert not np.allclose(codes[1], codes[2])


def test_unknown_qi_rejected():
    agent = small_agent()
    with pytest.raises(ConfigError):
        agent.compress_ue_state(make_obs(np.ones((4, 4)), qi=[1, 2, 5, 1]))


def test_identity_permutation_is_plain_concatenation():
    rng = np.random.default_rng(1)
    codes = rng.normal(size=(2, 4, 3))
    X = rng.normal(size=(2, 2, 5))
    emb = rng.normal(size=(2, 3))
    ident = np.tile(np.arange(4), (2, 1))
    out = build_input(codes, X, emb, ident)
    assert np.array_equal(out, np.concatenate([codes.reshape(2, -1), X.reshape(2, -1), emb], axis=1))


def test_build_input_permutes_codes_and_x_together():
    rng = np.random.default_rng(2)
    codes = rng.normal(size=(1, 4, 3))
    X = rng.normal(size=(1, 2, 5))
    emb = rng.normal(size=(1, 3))
    perm = np.array([[2, 0, 3, 1]])
    out = build_input(codes, X, emb, perm)
    assert np.array_equal(out[0, :12].reshape(4, 3), codes[0, perm[0]])
    Xp = out[0, 12:22].reshape(2, 5)
    assert np.array_equal(Xp[:, :4], X[0][:, perm[0]])
    assert np.array_equal(Xp[:, 4], X[0][:, 4])
    # the gradient split is the exact adjoint of the layout
    g = rng.normal(size=out.shape)
    gc, gX, ge = split_input_grad(g, 4, 2, perm)
    lhs = float(np.sum(g * out))
    rhs = float(np.sum(gc * codes) + np.sum(gX * X) + np.sum(ge * emb))
    assert lhs == pytest.approx(rhs, rel=1e-12)


# -- decisions --------------------------------------------------------------------------

def test_all_empty_buffers_leave_every_slot_empty():
    agent = small_agent()
    obs = make_obs(np.zeros((4, 4)))
    for explore in (False, True):
        X, actions = agent.actor_decide_prb(obs, explore=explore)
        assert np.allclose(X[:, :4], 0.0) and np.allclose(X[:, 4], 1.0)
        assert actions == [4, 4]


def test_decision_deterministic_without_exploration():
    agent = small_agent(dropout=0.5)
    obs = random_obs(np.random.default_rng(3), 4, 4)
    X1 = agent.decision_matrix(obs)
    X2 = agent.decision_matrix(obs)
    assert np.array_equal(X1, X2)
    assert agent.decide(obs) == agent.decide(obs)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), explore=st.booleans())
def test_rows_on_simplex_and_masked(seed, explore):
    rng = np.random.default_rng(seed)
    agent = small_agent(seed=seed % 7)
    obs = random_obs(rng, 4, 4, prb_index=int(rng.integers(2)))
    perm = PermState.random(4, rng)
    X = agent.decision_matrix(obs, perm, explore=explore)
    assert np.allclose(X.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(X >= 0)
    assert np.all(X[:, :4][:, ~obs.nonempty] == 0)
    actions = agent.sample_actions(X)
    ues = [a for a in actions if a != 4]
    assert len(ues) == len(set(ues)) and all(obs.nonempty[u] for u in ues)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_permutation_equivariance(seed):
    # relabelling UEs relabels the decision matrix; nothing is misrouted
    rng = np.random.default_rng(seed)
    agent = small_agent(seed=1)
    obs = random_obs(rng, 4, 4)
    p = rng.permutation(4)
    relabelled = make_obs(obs.sizes[p], obs.ages[p], obs.cqi[p], obs.qi[p], obs.prb_index)
    perm = PermState.random(4, rng)
    X = agent.decision_matrix(obs, perm)
    # the actor sees the same shuffled layout when the permutation is relabelled accordingly
    q = np.argsort(p)[perm.perm]
    Xr = agent.decision_matrix(relabelled, PermState(q, np.argsort(q)))
    assert np.allclose(Xr[:, :4], X[:, :4][:, p], atol=1e-12)
    assert np.allclose(Xr[:, 4], X[:, 4], atol=1e-12)


def test_unfilled_x_rejected_by_critic():
    agent = small_agent()
    obs = random_obs(np.random.default_rng(4), 4, 4)
    with pytest.raises(ValueError):
        agent.critic_q(obs, np.zeros((2, 5)))
    X = agent.decision_matrix(obs)
    assert agent.critic_q(obs, X) == agent.critic_q(obs, X)


# -- updates ------------------------------------------------------------------------------

def test_gamma_zero_target_is_scaled_reward():
    agent = small_agent(gamma=0.0, reward_scale=1.0, lr_critic=0.05)
    rng = np.random.default_rng(5)
    batch = make_batch(rng, 8)
    before = agent.critic_update(batch)
    for _ in range(400):
        loss = agent.critic_update(batch)
    assert loss < 1e-2 * before
    q = [agent.critic_q(*_obs_pair(batch, i)) for i in range(8)]
    assert np.allclose(q, batch.reward, atol=0.2 * np.abs(batch.reward).max())


def _obs_pair(batch, i):
    from nomarl.env import Observation
    obs = Observation(batch.sizes[i], batch.ages[i], batch.cqi[i], batch.qi[i], int(batch.prb[i]))
    return obs, batch.X[i]


def test_critic_fixed_point_zero_update():
    agent = small_agent(gamma=0.9)
    for tower in (agent.critic, agent.target_critic):
        tower.head.weights[-1][...] = 0.0
        tower.head.biases[-1][...] = 0.0
    batch = make_batch(np.random.default_rng(6), 6, reward=0.0)
    before = agent.critic.flat.copy()
    assert agent.critic_update(batch) == 0.0
    assert np.array_equal(agent.critic.flat, before)


def test_actor_unchanged_when_critic_ignores_x():
    agent = small_agent()
    K, M = 4, 2
    W = agent.critic.head.weights[0]
    W[:, 3 * K:3 * K + M * (K + 1)] = 0.0
    before = agent.actor.flat.copy()
    agent.actor_update(make_batch(np.random.default_rng(7), 6))
    assert np.array_equal(agent.actor.flat, before)


def test_updates_touch_only_their_network():
    agent = small_agent()
    batch = make_batch(np.random.default_rng(8), 6)
    actor0, critic0 = agent.actor.flat.copy(), agent.critic.flat.copy()
    agent.critic_update(batch)
    assert np.array_equal(agent.actor.flat, actor0)
    assert not np.array_equal(agent.critic.flat, critic0)
    critic1 = agent.critic.flat.copy()
    agent.actor_update(batch)
    assert np.array_equal(agent.critic.flat, critic1)
    assert not np.array_equal(agent.actor.flat, actor0)


def test_target_sync_extremes_and_geometric_convergence():
    agent = small_agent()
    agent.actor.flat += 1.0
    agent.critic.flat -= 2.0
    frozen = agent.target_actor.flat.copy()
    agent.target_sync(0.0)
    assert np.array_equal(agent.target_actor.flat, frozen)
    gap0 = np.abs(agent.target_actor.flat - agent.actor.flat).max()
    tau, n = 0.005, 300
    for _ in range(n):
        agent.target_sync(tau)
    gap = np.abs(agent.target_actor.flat - agent.actor.flat).max()
    assert gap == pytest.approx(gap0 * (1 - tau) ** n, rel=1e-9)
    agent.target_sync(1.0)
    assert np.array_equal(agent.target_actor.flat, agent.actor.flat)
    assert np.array_equal(agent.target_critic.flat, agent.critic.flat)


def test_target_towers_are_independent_copies():
    agent = small_agent()
    agent.actor.head.weights[0][0, 0] += 1.0
    assert agent.actor.flat[agent.actor.flat.size - 1] == agent.actor.head.biases[-1][-1]
    assert not np.array_equal(agent.actor.flat, agent.target_actor.flat)


# -- persistence ------------------------------------------------------------------------------

def test_agent_save_load_round_trip(tmp_path):
    agent = small_agent(seed=3)
    agent.update(make_batch(np.random.default_rng(9), 6))
    path = tmp_path / "a.ckpt"
    agent.save(path, {"note": 1})
    loaded = Agent.load(path)
    assert loaded.header["note"] == 1
    assert loaded.env_config == agent.env_config and loaded.config == agent.config
    for name, arr in agent.named_arrays().items():
        assert loaded.named_arrays()[name].tobytes() == arr.tobytes()
    obs = random_obs(np.random.default_rng(10), 4, 4)
    assert np.array_equal(loaded.decision_matrix(obs), agent.decision_matrix(obs))


def test_agent_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="bogus"):
        AgentConfig.from_dict({"bogus": 1})
