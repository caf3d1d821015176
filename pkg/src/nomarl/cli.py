"""Command line entry point.

    nomarl train    --config run.yaml --out runs/a
    nomarl eval     --config run.yaml --checkpoint runs/a/agent.ckpt --out runs/a
    nomarl test     --config run.yaml --agent npfca --out runs/a
    nomarl bench    --config run.yaml [--checkpoint runs/a/agent.ckpt] --out runs/a
    nomarl env-demo --config run.yaml --agent rr --seed 3 --out runs/demo

Exit codes: 0 success, 2 configuration error, 3 missing artifact.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

import yaml

from . import harness
from .agent import Agent
from .config import AGENT_NAMES, RunConfig, load_config, preset_config, with_seed
from .env import ConfigError, NomaUplinkEnv, write_trace_csv

log = logging.getLogger("nomarl")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3
CHECKPOINT_NAME = "agent.ckpt"


class MissingArtifact(Exception):
    pass


def _header_lines(cfg: RunConfig, seeds) -> list:
    return [f"config_hash={cfg.config_hash()}", f"seeds={','.join(str(s) for s in seeds)}"]


def _out_path(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.out_dir, name)


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_agent(cfg: RunConfig, checkpoint) -> Agent:
    if not checkpoint:
        raise MissingArtifact("the drl agent needs --checkpoint")
    if not os.path.exists(checkpoint):
        raise MissingArtifact(f"checkpoint not found: {checkpoint}")
    agent = Agent.load(checkpoint)
    if agent.env_config != cfg.env:
        raise ConfigError("checkpoint was trained for a different env configuration")
    return agent


def _write_test_csv(path, cfg: RunConfig, result: harness.TestResult) -> None:
    with open(path, "w", newline="") as fh:
        for line in _header_lines(cfg, result.seeds):
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["realization_id", "seed", "cumulative_reward"])
        for i, (s, r) in enumerate(zip(result.seeds, result.rewards)):
            w.writerow([i, s, repr(float(r))])


def cmd_train(cfg: RunConfig, args) -> int:
    if cfg.agent_name != "drl":
        raise ConfigError("train only applies to agent 'drl'")
    os.makedirs(cfg.out_dir, exist_ok=True)
    agent = Agent(cfg.env, cfg.agent, seed=cfg.harness.seed)
    metrics_path = _out_path(cfg, "metrics.jsonl")
    timing_path = _out_path(cfg, "timing.jsonl")
    header = {"header": {"config_hash": cfg.config_hash(), "seed": cfg.harness.seed,
                         "eval_seeds": list(cfg.harness.eval_seeds),
                         "train_seed_pool": [cfg.harness.train_seed_start,
                                             cfg.harness.train_seed_start + cfg.harness.train_pool_size]}}
    with open(metrics_path, "w") as mfh, open(timing_path, "w") as tfh:
        mfh.write(json.dumps(header, sort_keys=True) + "\n")
        tfh.write(json.dumps(header, sort_keys=True) + "\n")

        def on_episode(rec):
            mfh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
            mfh.flush()
            tfh.write(json.dumps({"episode": rec.episode, "wall_ms": round(rec.wall_ms, 3)}) + "\n")
            msg = f"episode {rec.episode}: reward {rec.train_reward:.0f} t_stop {rec.t_stop}"
            if rec.eval_reward is not None:
                msg += f" eval {rec.eval_reward:.0f}"
            log.info(msg)

        history = harness.train_agent(cfg.env, agent, cfg.harness, on_episode, jobs=args.jobs)
    agent.save(_out_path(cfg, CHECKPOINT_NAME), {"config_hash": cfg.config_hash()})
    _save_resolved_config(cfg)
    if not args.no_plots:
        from .plotting import plot_training
        plot_training(history, _out_path(cfg, "training.png"), f"config_hash={cfg.config_hash()}")
    return EXIT_OK


def _save_resolved_config(cfg: RunConfig) -> None:
    with open(_out_path(cfg, "config.resolved.yaml"), "w") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n")
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


def cmd_eval(cfg: RunConfig, args) -> int:
    agent = _load_agent(cfg, args.checkpoint)
    os.makedirs(cfg.out_dir, exist_ok=True)
    horizon = harness.horizon_for(cfg.env, cfg.harness, "eval")
    rewards = harness.run_realizations("drl", cfg.env, cfg.harness.eval_seeds, horizon,
                                       agent=agent, jobs=args.jobs)
    _write_json(_out_path(cfg, "eval.json"), {
        "config_hash": cfg.config_hash(), "seeds": list(cfg.harness.eval_seeds), "horizon": horizon,
        "rewards": rewards, "mean_eval_reward": sum(rewards) / len(rewards)})
    return EXIT_OK


def _run_test(cfg: RunConfig, name: str, agent, seeds, jobs) -> harness.TestResult:
    return harness.test_agent(name, cfg.env, cfg.harness, cfg.baselines, agent, seeds, jobs)


def _seed_subset(cfg: RunConfig, n):
    seeds = list(cfg.harness.test_seeds)
    return seeds if n is None else seeds[:n]


def cmd_test(cfg: RunConfig, args) -> int:
    agent = _load_agent(cfg, args.checkpoint) if cfg.agent_name == "drl" else None
    os.makedirs(cfg.out_dir, exist_ok=True)
    result = _run_test(cfg, cfg.agent_name, agent, _seed_subset(cfg, args.realizations), args.jobs)
    _write_test_csv(_out_path(cfg, f"test_{cfg.agent_name}.csv"), cfg, result)
    summary = dict(result.summary, agent=cfg.agent_name, horizon=result.horizon,
                   config_hash=cfg.config_hash(), seeds=result.seeds)
    _write_json(_out_path(cfg, f"test_{cfg.agent_name}_summary.json"), summary)
    if not args.no_plots:
        from .plotting import plot_boxplot
        plot_boxplot({cfg.agent_name: result.rewards}, _out_path(cfg, f"test_{cfg.agent_name}.png"),
                     f"config_hash={cfg.config_hash()}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    agent = _load_agent(cfg, args.checkpoint) if args.checkpoint else None
    os.makedirs(cfg.out_dir, exist_ok=True)
    seeds = _seed_subset(cfg, args.realizations)
    names = ["random", "rr", "npfca"] + (["drl"] if agent is not None else [])
    results = {name: _run_test(cfg, name, agent, seeds, args.jobs) for name in names}
    with open(_out_path(cfg, "bench.csv"), "w", newline="") as fh:
        for line in _header_lines(cfg, seeds):
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["agent", "realization_id", "seed", "cumulative_reward"])
        for name, res in results.items():
            for i, (s, r) in enumerate(zip(res.seeds, res.rewards)):
                w.writerow([name, i, s, repr(float(r))])
    with open(_out_path(cfg, "bench_summary.csv"), "w", newline="") as fh:
        for line in _header_lines(cfg, seeds):
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["agent", "n", "mean", "median", "q1", "q3", "n_outliers", "horizon"])
        for name, res in results.items():
            s = res.summary
            w.writerow([name, s["n"], s["mean"], s["median"], s["q1"], s["q3"], len(s["outliers"]),
                        res.horizon])
    if not args.no_plots:
        from .plotting import plot_boxplot
        plot_boxplot({n: r.rewards for n, r in results.items()}, _out_path(cfg, "bench.png"),
                     f"config_hash={cfg.config_hash()}")
    return EXIT_OK


def cmd_env_demo(cfg: RunConfig, args) -> int:
    agent = _load_agent(cfg, args.checkpoint) if cfg.agent_name == "drl" else None
    os.makedirs(cfg.out_dir, exist_ok=True)
    seed = cfg.harness.seed
    scheduler = harness.make_scheduler(cfg.agent_name, cfg.env, cfg.baselines, agent, seed)
    rows = []
    harness.run_policy_episode(cfg.env, scheduler, seed, cfg.env.t_max, trace=rows)
    path = _out_path(cfg, f"trace_{cfg.agent_name}_seed{seed}.csv")
    write_trace_csv(path, rows, cfg.env.K, _header_lines(cfg, [seed]))
    if not args.no_plots:
        from .plotting import plot_trace
        plot_trace(rows, path[:-4] + ".png", f"config_hash={cfg.config_hash()}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "test": cmd_test, "bench": cmd_bench,
            "env-demo": cmd_env_demo}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nomarl", description="Uplink MC-NOMA scheduling workbench")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--preset", choices=["SE", "LE", "tiny"], help="use a preset instead of --config")
    p.add_argument("--seed", type=int, help="harness seed (agent init, training draws, env-demo realization)")
    p.add_argument("--agent", choices=AGENT_NAMES, help="scheduler to run")
    p.add_argument("--checkpoint", help="agent checkpoint for the drl scheduler")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for eval/test realizations")
    p.add_argument("--out", help="output directory (overrides config out_dir)")
    p.add_argument("--episodes", type=int, help="override harness.episodes")
    p.add_argument("--realizations", type=int, help="use only the first N test seeds")
    p.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = preset_config(args.preset)
    else:
        raise ConfigError("one of --config or --preset is required")
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if args.agent:
        cfg = replace(cfg, agent_name=args.agent)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.episodes is not None:
        cfg = replace(cfg, harness=replace(cfg.harness, episodes=args.episodes))
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if args.realizations is not None and args.realizations < 1:
        raise ConfigError("--realizations must be >= 1")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError) as exc:
        if isinstance(exc, FileNotFoundError) and args.config and not os.path.exists(args.config):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if isinstance(exc, ConfigError):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
