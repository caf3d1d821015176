"""Run configuration: YAML loading, validation, presets and hashing.

Schema (all sections optional except that ``env`` needs K, N, M, L unless a
``preset`` is given)::

    preset: SE | LE | tiny          # fills env/agent/harness defaults
    agent_name: drl                 # random | rr | npfca | drl
    out_dir: runs/example
    env:
      K: 20
      N: 10
      M: 2
      L: 8
      bandwidth_hz: 10.0e6
      tx_power_dbm: 13.0
      carrier_hz: 2.0e9
      noise_dbm: null               # null -> -174 dBm/Hz over B/N
      constant_interference_dbm: -105.0
      tti_seconds: 1.0e-3
      mobility_dt_s: 1.0
      t_max: 600
      area_m: 1000.0
      min_distance_m: 1.0
      speed_mean_mps: 1.2
      speed_std_mps: 0.5
      qos:                          # exactly QIs 1..4
        - {qi: 1, pdb_steps: 100, gbr_bits_per_step: 18.8, packet_bits: 376, period_steps: 20}
        ...
    agent:      {see AgentConfig}
    harness:    {see TrainConfig}
    baselines:  {pf_beta: 0.05, pf_floor: 1.0}

Unknown keys are rejected with a message naming the key.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Optional

import yaml

from .agent import AgentConfig
from .env import DEFAULT_QOS, ConfigError, EnvConfig, QosProfile
from .harness import TrainConfig

AGENT_NAMES = ("random", "rr", "npfca", "drl")


PRESETS = {
    "SE": {
        "env": {"K": 20, "N": 10, "M": 2, "L": 8},
        "agent": {"hidden_width": 603, "hidden_layers": 3, "dropout": 0.0},
        "harness": {"w_cap": -80000.0, "eval_gate": None},
    },
    "LE": {
        "env": {"K": 32, "N": 25, "M": 2, "L": 8},
        "agent": {"hidden_width": 963, "hidden_layers": 3, "dropout": 0.2},
        "harness": {"w_cap": -150000.0, "eval_gate": -1552.0},
    },
    # desk-scale setting used for fast end-to-end runs: short PDBs and small
    # packets so that penalties respond to individual scheduling decisions,
    # with a narrow band that keeps the two PRBs persistently contended
    "tiny": {
        "env": {"K": 4, "N": 2, "M": 2, "L": 4, "bandwidth_hz": 120e3, "t_max": 200,
                "qos": [
                    {"qi": 1, "pdb_steps": 20, "gbr_bits_per_step": 80.0, "packet_bits": 400,
                     "period_steps": 5},
                    {"qi": 2, "pdb_steps": 15, "gbr_bits_per_step": 300.0, "packet_bits": 1200,
                     "period_steps": 4},
                    {"qi": 3, "pdb_steps": 5, "gbr_bits_per_step": 150.0, "packet_bits": 300,
                     "period_steps": 2},
                    {"qi": 4, "pdb_steps": 40, "gbr_bits_per_step": 0.0, "packet_bits": 2000,
                     "arrival_prob": 0.2},
                ]},
        "agent": {"hidden_width": 64, "hidden_layers": 2, "enn_hidden": [16, 8], "dropout": 0.0},
        "harness": {"t_max": 200, "w_cap": -100000.0, "eval_gate": None, "batch_size": 32,
                    "eval_horizon": 100, "test_horizon": 1000},
    },
}


@dataclass(frozen=True)
class BaselineConfig:
    pf_beta: float = 0.05
    pf_floor: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.pf_beta <= 1.0:
            raise ConfigError("baselines.pf_beta must be in (0, 1]")
        if not self.pf_floor > 0.0:
            raise ConfigError("baselines.pf_floor must be > 0")


@dataclass
class RunConfig:
    env: EnvConfig
    agent: AgentConfig = field(default_factory=AgentConfig)
    harness: TrainConfig = field(default_factory=TrainConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    agent_name: str = "drl"
    out_dir: str = "runs/default"
    preset: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "agent_name": self.agent_name,
            "out_dir": self.out_dir,
            "env": env_config_to_dict(self.env),
            "agent": _jsonable(asdict(self.agent)),
            "harness": _jsonable(asdict(self.harness)),
            "baselines": asdict(self.baselines),
        }

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d


def env_config_to_dict(cfg: EnvConfig) -> dict:
    d = asdict(cfg)
    d["qos"] = [asdict(p) for p in cfg.qos]
    return _jsonable(d)


def env_config_from_dict(d: dict) -> EnvConfig:
    d = dict(d)
    names = {f.name for f in fields(EnvConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown env keys: {sorted(unknown)}")
    if "qos" in d:
        qos = []
        qnames = {f.name for f in fields(QosProfile)}
        for entry in d["qos"]:
            bad = set(entry) - qnames
            if bad:
                raise ConfigError(f"unknown env.qos keys: {sorted(bad)}")
            qos.append(QosProfile(**entry))
        d["qos"] = tuple(qos)
    for key in ("K", "N", "M", "L", "t_max"):
        if key in d and isinstance(d[key], float) and d[key].is_integer():
            d[key] = int(d[key])
    return EnvConfig(**d)


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


TOP_KEYS = {"preset", "agent_name", "out_dir", "env", "agent", "harness", "baselines"}


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    preset = raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r} (choose from {sorted(PRESETS)})")
        raw = _merge(PRESETS[preset], raw)
    env_raw = raw.get("env") or {}
    for key in ("K", "N", "M", "L"):
        if key not in env_raw:
            raise ConfigError(f"env.{key} is required")
    env = env_config_from_dict(env_raw)
    agent = AgentConfig.from_dict(raw.get("agent") or {})
    harness = TrainConfig.from_dict(raw.get("harness") or {})
    bl_raw = raw.get("baselines") or {}
    bad = set(bl_raw) - {f.name for f in fields(BaselineConfig)}
    if bad:
        raise ConfigError(f"unknown baselines keys: {sorted(bad)}")
    baselines = BaselineConfig(**bl_raw)
    name = raw.get("agent_name", "drl")
    if name not in AGENT_NAMES:
        raise ConfigError(f"agent_name must be one of {AGENT_NAMES}, got {name!r}")
    return RunConfig(env=env, agent=agent, harness=harness, baselines=baselines, agent_name=name,
                     out_dir=str(raw.get("out_dir", "runs/default")), preset=preset)


def load_config(path) -> RunConfig:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return config_from_dict(raw)


def preset_config(name: str, **overrides: Any) -> RunConfig:
    return config_from_dict(_merge({"preset": name}, overrides))


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, harness=replace(cfg.harness, seed=int(seed)))
