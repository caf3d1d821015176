"""Actor-critic scheduler with buffer-state encoders.

Pipeline for one PRB decision:

1. every UE observation (packet sizes, packet ages, CQI, QI) is age-capped,
   scaled and compressed to a 3-vector by the encoder of its QoS class;
2. the UE codes are shuffled by a random permutation and concatenated with
   the (identically shuffled) decision matrix ``X`` and a learned PRB
   embedding;
3. the actor head outputs a softmax over ``K + 1`` actions (last entry:
   leave the slot empty), which is un-shuffled, masked to UEs with data and
   renormalised, then written into row ``m`` of ``X``;
4. step 3 repeats for all ``M`` NOMA slots, after which one action per slot
   is sampled without repeating a UE.

The critic shares the input layout (own encoders and embedding) and outputs
a single action value for a full ``X``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import List, Optional

import numpy as np

from .env import ConfigError, EnvConfig, Observation
from .nn import (MLP, Adam, Embedding, apply_param_noise, load_checkpoint, polyak_update,
                 save_checkpoint, spec_dicts, stack_specs)

CODE_DIM = 3
QIS = (1, 2, 3, 4)


@dataclass(frozen=True)
class AgentConfig:
    enn_hidden: tuple = (32, 16)
    hidden_width: int = 603
    hidden_layers: int = 3
    dropout: float = 0.2
    gamma: float = 0.95
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    tau: float = 0.005
    noise_sigma: float = 0.1
    masking: bool = True
    age_capping: bool = True
    reward_scale: float = 1e-3
    eval_policy: str = "greedy"   # greedy | sample

    def __post_init__(self):
        if self.hidden_width < 1 or self.hidden_layers < 1:
            raise ConfigError("hidden_width and hidden_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must be in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.eval_policy not in ("greedy", "sample"):
            raise ConfigError("eval_policy must be 'greedy' or 'sample'")

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown agent keys: {sorted(unknown)}")
        d = dict(d)
        if "enn_hidden" in d:
            d["enn_hidden"] = tuple(d["enn_hidden"])
        return cls(**d)


def input_width(K: int, M: int) -> int:
    return CODE_DIM * K + M * (K + 1) + CODE_DIM


# -- observation preprocessing --------------------------------------------

def age_cap(obs: Observation, pdb_table: np.ndarray) -> Observation:
    """Clamp every packet age at the PDB of its UE's QoS class."""
    cap = pdb_table[obs.qi][:, None]
    return Observation(sizes=obs.sizes.copy(), ages=np.minimum(obs.ages, cap), cqi=obs.cqi.copy(),
                       qi=obs.qi.copy(), prb_index=obs.prb_index)


def ue_features(sizes, ages, cqi, qi, env_config: EnvConfig, capped: bool = True) -> np.ndarray:
    """Scaled per-UE features ``(..., K, 2L+2)``.

    Sizes are divided by the largest packet size, ages by the class PDB
    (after capping they lie in [0, 1]), CQI by 15 and QI by 4.
    """
    qi = np.asarray(qi)
    if qi.size and (qi.min() < QIS[0] or qi.max() > QIS[-1]):
        raise ConfigError(f"unknown QI values in {sorted(set(qi.ravel().tolist()))}")
    pdb = env_config.pdb_table()[qi][..., None].astype(float)
    ages = np.asarray(ages, dtype=float)
    if capped:
        ages = np.minimum(ages, pdb)
    return np.concatenate([
        np.asarray(sizes, dtype=float) / env_config.max_packet_bits,
        ages / pdb,
        np.asarray(cqi, dtype=float)[..., None] / 15.0,
        np.asarray(qi, dtype=float)[..., None] / 4.0,
    ], axis=-1)


def traffic_mask(sizes, enabled: bool = True) -> np.ndarray:
    """(..., K+1) boolean mask; last entry (leave empty) always set."""
    nonempty = np.asarray(sizes)[..., 0] > 0
    if not enabled:
        nonempty = np.ones_like(nonempty)
    return np.concatenate([nonempty, np.ones(nonempty.shape[:-1] + (1,), dtype=bool)], axis=-1)


def mask_and_renormalize(x, h):
    """Zero masked entries of a probability vector and rescale to sum 1.

    With no mass left, everything goes to the last entry (leave empty).
    """
    x = np.asarray(x, dtype=float) * np.asarray(h, dtype=float)
    total = x.sum(axis=-1, keepdims=True)
    fallback = np.zeros_like(x)
    fallback[..., -1] = 1.0
    return np.where(total > 0, x / np.where(total > 0, total, 1.0), fallback)


# -- permutation helpers ----------------------------------------------------

@dataclass
class PermState:
    perm: np.ndarray      # position i holds UE perm[i]
    inverse: np.ndarray

    @classmethod
    def random(cls, K: int, rng: np.random.Generator) -> "PermState":
        p = rng.permutation(K)
        return cls(p, np.argsort(p))

    @classmethod
    def identity(cls, K: int) -> "PermState":
        p = np.arange(K)
        return cls(p, p.copy())


def _gather_columns(A, perm):
    """Reorder the first K columns of A (B, ..., K+1) by perm (B, K); last column fixed."""
    B = A.shape[0]
    out = np.empty_like(A)
    if A.ndim == 2:
        out[:, :-1] = A[np.arange(B)[:, None], perm]
    else:
        out[..., :-1] = A[np.arange(B)[:, None, None], np.arange(A.shape[1])[None, :, None], perm[:, None, :]]
    out[..., -1] = A[..., -1]
    return out


def _permute_columns(A, perm):
    """Position i of the result holds UE column perm[i]."""
    return _gather_columns(A, perm)


def _unpermute_columns(A, perm):
    """Inverse of ``_permute_columns``."""
    return _gather_columns(A, np.argsort(perm, axis=1))


def build_input(codes, X, emb, perm) -> np.ndarray:
    """Concatenate shuffled codes, shuffled/flattened X and the PRB embedding.

    codes (B, K, 3), X (B, M, K+1), emb (B, 3), perm (B, K) -> (B, 3K + M(K+1) + 3)
    """
    B = codes.shape[0]
    codes_p = codes[np.arange(B)[:, None], perm]
    X_p = _permute_columns(X, perm)
    return np.concatenate([codes_p.reshape(B, -1), X_p.reshape(B, -1), emb], axis=1)


def split_input_grad(g, K: int, M: int, perm):
    """Inverse of ``build_input`` for gradients: (g_codes, g_X, g_emb) in UE order."""
    B = g.shape[0]
    gc_p = g[:, :CODE_DIM * K].reshape(B, K, CODE_DIM)
    gX_p = g[:, CODE_DIM * K:CODE_DIM * K + M * (K + 1)].reshape(B, M, K + 1)
    g_emb = g[:, CODE_DIM * K + M * (K + 1):]
    g_codes = np.empty_like(gc_p)
    g_codes[np.arange(B)[:, None], perm] = gc_p
    return g_codes, _unpermute_columns(gX_p, perm), g_emb


# -- networks ---------------------------------------------------------------

class Tower:
    """Encoders + PRB embedding + dense head on the shared input layout."""

    def __init__(self, env_config: EnvConfig, agent_config: AgentConfig, n_out: int,
                 output_activation: str, rng: np.random.Generator):
        K, M, L, N = env_config.K, env_config.M, env_config.L, env_config.N
        self.K, self.M = K, M
        widths = [2 * L + 2, *agent_config.enn_hidden, CODE_DIM]
        self.enns = {q: MLP(stack_specs(widths, "relu", "linear"), rng) for q in QIS}
        self.emb = Embedding(N, CODE_DIM, rng)
        head_widths = [input_width(K, M)] + [agent_config.hidden_width] * agent_config.hidden_layers + [n_out]
        self.head = MLP(stack_specs(head_widths, "relu", output_activation, agent_config.dropout), rng)
        self._bind(np.concatenate([p.ravel() for p in self.params()]))

    def _bind(self, flat: np.ndarray) -> None:
        """Make every parameter array a view into one contiguous vector."""
        self.flat = flat
        offset = 0

        def take(shape):
            nonlocal offset
            n = int(np.prod(shape))
            view = flat[offset:offset + n].reshape(shape)
            offset += n
            return view

        for q in QIS:
            enn = self.enns[q]
            for i in range(len(enn.weights)):
                enn.weights[i] = take(enn.weights[i].shape)
                enn.biases[i] = take(enn.biases[i].shape)
        self.emb.table = take(self.emb.table.shape)
        for i in range(len(self.head.weights)):
            self.head.weights[i] = take(self.head.weights[i].shape)
            self.head.biases[i] = take(self.head.biases[i].shape)
        assert offset == flat.size

    def params(self) -> List[np.ndarray]:
        out = []
        for q in QIS:
            out += self.enns[q].params()
        return out + self.emb.params() + self.head.params()

    def named_params(self, prefix: str) -> dict:
        named = {}
        for q in QIS:
            for i, p in enumerate(self.enns[q].params()):
                named[f"{prefix}.enn{q}.{i}"] = p
        named[f"{prefix}.embedding"] = self.emb.table
        for i, p in enumerate(self.head.params()):
            named[f"{prefix}.head.{i}"] = p
        return named

    def copy(self) -> "Tower":
        new = Tower.__new__(Tower)
        new.K, new.M = self.K, self.M
        new.enns = {q: m.copy() for q, m in self.enns.items()}
        new.emb = self.emb.copy()
        new.head = self.head.copy()
        new._bind(self.flat.copy())
        return new

    def encode(self, F, qi):
        """F (B, K, 2L+2), qi (B, K) -> codes (B, K, 3) and cache."""
        B, K = qi.shape
        flatF = F.reshape(B * K, -1)
        flatq = qi.reshape(-1)
        codes = np.zeros((B * K, CODE_DIM))
        if flatq.min() < QIS[0] or flatq.max() > QIS[-1]:
            raise ConfigError(f"unknown QI values in {sorted(set(flatq.tolist()))}")
        cache = []
        for q in QIS:
            idx = np.flatnonzero(flatq == q)
            if idx.size == 0:
                continue
            out, c = self.enns[q].forward(flatF[idx])
            codes[idx] = out
            cache.append((q, idx, c))
        return codes.reshape(B, K, CODE_DIM), cache

    def encode_backward(self, cache, g_codes) -> List[np.ndarray]:
        flat = g_codes.reshape(-1, CODE_DIM)
        grads = {q: [np.zeros_like(p) for p in self.enns[q].params()] for q in QIS}
        for q, idx, c in cache:
            grads[q] = self.enns[q].backward(c, flat[idx])[0]
        out = []
        for q in QIS:
            out += grads[q]
        return out


def _flatten(grads) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads])


def _zero_like(params):
    return [np.zeros_like(p) for p in params]


class Agent:
    """Actor-critic scheduler (online + target networks and optimizers)."""

    name = "drl"

    def __init__(self, env_config: EnvConfig, config: AgentConfig = AgentConfig(), seed: int = 0):
        self.env_config = env_config
        self.config = config
        self.seed = int(seed)
        init_rng = np.random.default_rng([self.seed, 1])
        K = env_config.K
        self.actor = Tower(env_config, config, K + 1, "softmax", init_rng)
        self.critic = Tower(env_config, config, 1, "linear", init_rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = Adam([self.actor.flat], config.lr_actor, config.adam_beta1,
                              config.adam_beta2, config.adam_eps)
        self.critic_opt = Adam([self.critic.flat], config.lr_critic, config.adam_beta1,
                               config.adam_beta2, config.adam_eps)
        self.rng = np.random.default_rng([self.seed, 2])

    # -- shapes ---------------------------------------------------------------
    @property
    def actor_input_width(self) -> int:
        return self.actor.head.n_in

    @property
    def actor_output_width(self) -> int:
        return self.actor.head.n_out

    # -- preprocessing -----------------------------------------------------
    def features(self, sizes, ages, cqi, qi):
        return ue_features(sizes, ages, cqi, qi, self.env_config, self.config.age_capping)

    def mask(self, sizes):
        return traffic_mask(sizes, self.config.masking)

    def compress_ue_state(self, obs: Observation, tower: Optional[Tower] = None) -> np.ndarray:
        """(K, 3) codes of all UEs from the actor's encoders."""
        tower = tower or self.actor
        F = self.features(obs.sizes, obs.ages, obs.cqi, obs.qi)
        return tower.encode(F[None], obs.qi[None])[0][0]

    # -- sequential decision ------------------------------------------------
    def _decide(self, tower: Tower, F, qi, prb, perm, mask, train=False, head=None):
        head = head or tower.head
        B, K = qi.shape
        M = self.env_config.M
        codes, enc_cache = tower.encode(F, qi)
        emb = tower.emb.forward(prb)
        X = np.zeros((B, M, K + 1))
        steps = []
        for m in range(M):
            inp = build_input(codes, X, emb, perm)
            y_p, hc = head.forward(inp, train=train, rng=self.rng if train else None)
            y = _unpermute_columns(y_p, perm)
            masked = y * mask
            S = masked.sum(axis=1, keepdims=True)
            x = masked / S
            X = X.copy()
            X[:, m] = x
            steps.append((hc, x, S))
        return X, (enc_cache, steps, prb, perm, mask)

    def _decide_backward(self, tower: Tower, cache, G):
        """Backprop dL/dX through the whole sequential decision."""
        enc_cache, steps, prb, perm, mask = cache
        G = G.copy()
        B, M, K1 = G.shape
        K = K1 - 1
        head_grads = _zero_like(tower.head.params())
        g_codes = np.zeros((B, K, CODE_DIM))
        g_emb = np.zeros((B, CODE_DIM))
        for m in range(M - 1, -1, -1):
            hc, x, S = steps[m]
            gx = G[:, m]
            gy = mask * (gx - np.sum(gx * x, axis=1, keepdims=True)) / S
            gy_p = _permute_columns(gy, perm)
            hg, ginp = tower.head.backward(hc, gy_p)
            for acc, g in zip(head_grads, hg):
                acc += g
            gc, gX, ge = split_input_grad(ginp, K, M, perm)
            g_codes += gc
            g_emb += ge
            G[:, :m] += gX[:, :m]
        return tower.encode_backward(enc_cache, g_codes) + tower.emb.backward(prb, g_emb) + head_grads

    def decision_matrix(self, obs: Observation, perm: Optional[PermState] = None,
                        explore: bool = False, tower: Optional[Tower] = None) -> np.ndarray:
        """Row-filled (M, K+1) matrix for one PRB (no sampling)."""
        tower = tower or self.actor
        K = self.env_config.K
        perm = perm or PermState.identity(K)
        head = tower.head
        if explore and self.config.noise_sigma > 0:
            head = apply_param_noise(head, self.config.noise_sigma, self.rng)
        F = self.features(obs.sizes, obs.ages, obs.cqi, obs.qi)[None]
        X, _ = self._decide(tower, F, obs.qi[None], np.array([obs.prb_index]), perm.perm[None],
                            self.mask(obs.sizes)[None].astype(float), head=head)
        return X[0]

    def sample_actions(self, X: np.ndarray, greedy: bool = False) -> list:
        """One action per row; a UE picked in an earlier row is excluded later."""
        M, K1 = X.shape
        K = K1 - 1
        taken = np.zeros(K1, dtype=bool)
        actions = []
        for m in range(M):
            p = X[m].copy()
            p[taken] = 0.0
            total = p.sum()
            if total <= 0.0:
                a = K
            elif greedy:
                a = int(np.argmax(p))
            else:
                p /= total
                a = int(min(np.searchsorted(np.cumsum(p), self.rng.random(), side="right"), K))
                while p[a] == 0.0:   # guard against cumsum round-off landing on a zero entry
                    a -= 1
            actions.append(a)
            if a != K:
                taken[a] = True
        return actions

    def actor_decide_prb(self, obs: Observation, explore: bool = True):
        """Return (X, actions) for one PRB."""
        K = self.env_config.K
        perm = PermState.random(K, self.rng) if explore else PermState.identity(K)
        X = self.decision_matrix(obs, perm, explore=explore)
        greedy = (not explore) and self.config.eval_policy == "greedy"
        return X, self.sample_actions(X, greedy=greedy)

    # -- critic -------------------------------------------------------------
    def _q(self, tower: Tower, F, qi, prb, X, perm, train=False):
        codes, enc_cache = tower.encode(F, qi)
        emb = tower.emb.forward(prb)
        inp = build_input(codes, X, emb, perm)
        q, hc = tower.head.forward(inp, train=train, rng=self.rng if train else None)
        return q[:, 0], (enc_cache, hc, prb, perm)

    def _q_backward(self, tower: Tower, cache, g_q):
        enc_cache, hc, prb, perm = cache
        hg, ginp = tower.head.backward(hc, g_q[:, None])
        K, M = self.env_config.K, self.env_config.M
        gc, gX, ge = split_input_grad(ginp, K, M, perm)
        grads = tower.encode_backward(enc_cache, gc) + tower.emb.backward(prb, ge) + hg
        return grads, gX

    def critic_q(self, obs: Observation, X: np.ndarray, perm: Optional[PermState] = None) -> float:
        X = np.asarray(X, dtype=float)
        if not np.allclose(X.sum(axis=1), 1.0):
            raise ValueError("critic_q needs a fully filled decision matrix")
        perm = perm or PermState.identity(self.env_config.K)
        F = self.features(obs.sizes, obs.ages, obs.cqi, obs.qi)[None]
        q, _ = self._q(self.critic, F, obs.qi[None], np.array([obs.prb_index]), X[None], perm.perm[None])
        return float(q[0])

    # -- learning -----------------------------------------------------------
    def _batch_perms(self, B: int) -> np.ndarray:
        K = self.env_config.K
        return self.rng.permuted(np.tile(np.arange(K), (B, 1)), axis=1)

    def critic_update(self, batch) -> float:
        """One Adam step on the critic towards r + gamma * Q'(s', actor'(s'))."""
        cfg = self.config
        F = self.features(batch.sizes, batch.ages, batch.cqi, batch.qi)
        F2 = self.features(batch.next_sizes, batch.next_ages, batch.next_cqi, batch.next_qi)
        mask2 = self.mask(batch.next_sizes).astype(float)
        B = F.shape[0]
        perm2 = self._batch_perms(B)
        X2, _ = self._decide(self.target_actor, F2, batch.next_qi, batch.next_prb, perm2, mask2)
        q2, _ = self._q(self.target_critic, F2, batch.next_qi, batch.next_prb, X2, perm2)
        y = cfg.reward_scale * batch.reward + cfg.gamma * (1.0 - batch.terminal) * q2
        perm = self._batch_perms(B)
        q, cache = self._q(self.critic, F, batch.qi, batch.prb, batch.X, perm, train=True)
        err = q - y
        loss = float(np.mean(err ** 2))
        grads, _ = self._q_backward(self.critic, cache, 2.0 * err / B)
        self.critic_opt.step([_flatten(grads)])
        return loss

    def actor_update(self, batch) -> float:
        """One Adam step of the actor along dQ/dX * dX/dtheta; returns mean Q."""
        F = self.features(batch.sizes, batch.ages, batch.cqi, batch.qi)
        mask = self.mask(batch.sizes).astype(float)
        B = F.shape[0]
        perm = self._batch_perms(B)
        X, dcache = self._decide(self.actor, F, batch.qi, batch.prb, perm, mask, train=True)
        q, qcache = self._q(self.critic, F, batch.qi, batch.prb, X, perm)
        _, gX = self._q_backward(self.critic, qcache, -np.ones(B) / B)
        grads = self._decide_backward(self.actor, dcache, gX)
        self.actor_opt.step([_flatten(grads)])
        return float(np.mean(q))

    def target_sync(self, tau: Optional[float] = None) -> None:
        tau = self.config.tau if tau is None else tau
        polyak_update([self.target_actor.flat], [self.actor.flat], tau)
        polyak_update([self.target_critic.flat], [self.critic.flat], tau)

    def update(self, batch) -> tuple:
        closs = self.critic_update(batch)
        qmean = self.actor_update(batch)
        self.target_sync()
        return closs, qmean

    # -- scheduler protocol ---------------------------------------------------
    def reset(self, seed: int) -> None:
        pass

    def decide(self, obs: Observation) -> list:
        return self.actor_decide_prb(obs, explore=False)[1]

    def end_step(self, outcome) -> None:
        pass

    def inference_copy(self, seed: int) -> "Agent":
        """Shallow view sharing parameters, with its own rng for sampling."""
        view = Agent.__new__(Agent)
        view.__dict__.update(self.__dict__)
        view.rng = np.random.default_rng([int(seed), 3])
        return view

    # -- persistence ------------------------------------------------------------
    def named_arrays(self) -> dict:
        arrays = {}
        arrays.update(self.actor.named_params("actor"))
        arrays.update(self.critic.named_params("critic"))
        arrays.update(self.target_actor.named_params("target_actor"))
        arrays.update(self.target_critic.named_params("target_critic"))
        return arrays

    def save(self, path, extra: Optional[dict] = None) -> None:
        from .config import env_config_to_dict
        header = {
            "kind": "nomarl-agent",
            "seed": self.seed,
            "env": env_config_to_dict(self.env_config),
            "agent": asdict(self.config),
            "layers": {
                "actor_head": spec_dicts(self.actor.head.specs),
                "critic_head": spec_dicts(self.critic.head.specs),
                "enn": spec_dicts(self.actor.enns[1].specs),
            },
        }
        if extra:
            header.update(extra)
        save_checkpoint(path, header, self.named_arrays())

    @classmethod
    def load(cls, path) -> "Agent":
        from .config import env_config_from_dict
        header, arrays = load_checkpoint(path)
        if header.get("kind") != "nomarl-agent":
            raise ValueError(f"{path}: not an agent checkpoint")
        agent = cls(env_config_from_dict(header["env"]), AgentConfig.from_dict(header["agent"]),
                    seed=header["seed"])
        for name, arr in agent.named_arrays().items():
            if arrays[name].shape != arr.shape:
                raise ValueError(f"{path}: shape mismatch for {name}")
            arr[...] = arrays[name]
        agent.header = header
        return agent
