"""Command-line entry point: ``pretrain``, ``run``, ``sweep`` and ``inspect-correction``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .agent import SafetyHook
from .envs import TASK_IDS, State, make_task
from .harness import (
    AGENT_PROFILES,
    DEFAULT_MARGINS,
    VARIANTS,
    ConfigError,
    ExperimentConfig,
    aggregate,
    pretrain_pipeline,
    run_experiment,
    run_shaping_sweep,
)
from .safety_model import load_models, predict_sensitivity


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    return data


def _merge(base: dict, **flags) -> dict:
    """Flags that were given (not None) override the file config."""
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _agent_settings(args, file_cfg: dict) -> dict:
    profile = args.profile or file_cfg.pop("profile", None) or "desk"
    if profile not in AGENT_PROFILES:
        raise ConfigError(f"unknown agent profile {profile!r}; expected one of {sorted(AGENT_PROFILES)}")
    agent = {**AGENT_PROFILES[profile], **file_cfg.pop("agent", {})}
    if args.agent:
        agent.update(json.loads(args.agent))
    return agent


def cmd_pretrain(args) -> int:
    cfg = _merge(_load_config(args.config), task_id=args.task, episodes=args.episodes, seed=args.seed,
                 out_dir=args.out, epochs=args.epochs)
    for key in ("task_id", "episodes", "out_dir"):
        if key not in cfg:
            raise ConfigError(f"pretrain needs {key}")
    report = pretrain_pipeline(
        cfg["task_id"], int(cfg["episodes"]), cfg["out_dir"], seed=int(cfg.get("seed", 0)),
        epochs=int(cfg.get("epochs", 50)),
    )
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0


def cmd_run(args) -> int:
    file_cfg = _load_config(args.config)
    agent = _agent_settings(args, file_cfg)
    cfg = _merge(
        file_cfg,
        task_id=args.task,
        variant=args.variant,
        margin=args.margin,
        penalty=args.penalty,
        model_dir=args.model,
        seeds=_int_list(args.seeds) if args.seeds else None,
        episodes=args.episodes,
        out_dir=args.out,
        workers=args.workers,
    )
    cfg["agent"] = agent
    exp = ExperimentConfig.from_dict(cfg)
    runs = run_experiment(exp)
    summary = aggregate(list(runs.values()))["per_seed"]
    print(json.dumps({"out_dir": exp.out_dir, "per_seed": summary}, sort_keys=True, indent=2))
    return 0


def cmd_sweep(args) -> int:
    file_cfg = _load_config(args.config)
    agent = _agent_settings(args, file_cfg)
    cfg = _merge(
        file_cfg,
        task_id=args.task,
        margins=_float_list(args.margins) if args.margins else None,
        seeds=_int_list(args.seeds) if args.seeds else None,
        episodes=args.episodes,
        penalty=args.penalty,
        out_dir=args.out,
        workers=args.workers,
    )
    if "task_id" not in cfg:
        raise ConfigError("sweep needs a task")
    rows = run_shaping_sweep(
        cfg["task_id"],
        cfg.get("margins", list(DEFAULT_MARGINS)),
        cfg.get("seeds", [0, 1, 2]),
        cfg.get("out_dir", "sweep"),
        episodes=cfg.get("episodes"),
        agent=agent,
        penalty=cfg.get("penalty"),
        workers=int(cfg.get("workers", 1)),
    )
    print(json.dumps(rows, sort_keys=True, indent=2))
    return 0


def cmd_inspect(args) -> int:
    env = make_task(args.task)
    models = load_models(args.model)
    if len(models) != env.spec.num_constraints:
        raise ConfigError(f"{args.model} has {len(models)} models, {args.task} needs {env.spec.num_constraints}")
    obs = np.asarray(json.loads(args.state), dtype=np.float64)
    if obs.shape != (env.spec.state_dim,):
        raise ConfigError(f"state must have {env.spec.state_dim} entries, got {obs.shape}")
    action = np.asarray(json.loads(args.action), dtype=np.float64) if args.action else np.zeros(env.spec.action_dim)
    state = State(obs, env.safety_signals(env.position_from_obs(obs)))
    hook = SafetyHook(models)
    result = hook(state, action)
    out = result.to_dict()
    out.update({
        "proposed_action": action.tolist(),
        "signals": state.signals.tolist(),
        "thresholds": hook.thresholds.tolist(),
        "sensitivities": predict_sensitivity(models, obs).tolist(),
    })
    print(json.dumps(out, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safe-explore", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    pt = sub.add_parser("pretrain", help="collect random-action data and fit constraint models")
    pt.add_argument("--task", choices=TASK_IDS)
    pt.add_argument("--episodes", type=int)
    pt.add_argument("--seed", type=int)
    pt.add_argument("--epochs", type=int)
    pt.add_argument("--out")
    pt.add_argument("--config", help="JSON file; flags override its keys")
    pt.set_defaults(func=cmd_pretrain)

    def agent_flags(sp):
        sp.add_argument("--profile", choices=sorted(AGENT_PROFILES), help="agent size preset (default desk)")
        sp.add_argument("--agent", help="JSON object of agent overrides, e.g. '{\"tau\": 0.01}'")
        sp.add_argument("--workers", type=int, help="processes for independent seeds")
        sp.add_argument("--config", help="JSON file; flags override its keys")

    rn = sub.add_parser("run", help="train/eval one variant over several seeds")
    rn.add_argument("--task", choices=TASK_IDS)
    rn.add_argument("--variant", choices=VARIANTS)
    rn.add_argument("--margin", type=float)
    rn.add_argument("--penalty", type=float)
    rn.add_argument("--model", help="directory of pretrained constraint models (safety variant)")
    rn.add_argument("--seeds", help="comma-separated, e.g. 0,1,2")
    rn.add_argument("--episodes", type=int)
    rn.add_argument("--out")
    agent_flags(rn)
    rn.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="reward-shaping runs over a list of margins")
    sw.add_argument("--task", choices=TASK_IDS)
    sw.add_argument("--margins", help="comma-separated margins")
    sw.add_argument("--seeds")
    sw.add_argument("--episodes", type=int)
    sw.add_argument("--penalty", type=float)
    sw.add_argument("--out")
    agent_flags(sw)
    sw.set_defaults(func=cmd_sweep)

    ic = sub.add_parser("inspect-correction", help="print the safety layer's correction for one state")
    ic.add_argument("--task", required=True, choices=TASK_IDS)
    ic.add_argument("--model", required=True)
    ic.add_argument("--state", required=True, help="observation vector as JSON")
    ic.add_argument("--action", help="proposed action as JSON (default zeros)")
    ic.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
