"""Experiment driver: pretraining, DDPG variant runs, the shaping-margin sweep."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent import DdpgAgent, DdpgConfig, ReplayBuffer, SafetyHook, Transition
from .envs import TASK_IDS, State, TaskSpec, Termination, make_task
from .numcore import make_rng
from .safety_model import (
    collect_random_dataset,
    load_models,
    save_models,
    train_constraint_models,
)

log = logging.getLogger(__name__)

CSV_HEADER = ("episode", "seed", "variant", "return", "violated", "cum_violations", "steps")
VARIANTS = ("plain", "shaping", "safety")
DEFAULT_MARGINS = (0.08, 0.11, 0.14, 0.17, 0.2, 0.23)
DEFAULT_PENALTY = {"ball": -1.0, "spaceship": -1000.0}
DEFAULT_EPISODES = {"ball": 300, "spaceship": 500}
# "full" keeps the default network sizes; "desk" shrinks networks and batch so runs finish in minutes
AGENT_PROFILES = {
    "full": {},
    "desk": {"actor_hidden": [64, 64], "critic_hidden": [64, 64], "batch_size": 64},
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task_id: str
    variant: str = "plain"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    episodes: int | None = None
    margin: float | None = None
    penalty: float | None = None
    model_dir: str | None = None
    out_dir: str = "runs"
    agent: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self) -> None:
        if self.task_id not in TASK_IDS:
            raise ConfigError(f"unknown task {self.task_id!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        domain = "ball" if self.task_id.startswith("Ball") else "spaceship"
        if self.episodes is None:
            self.episodes = DEFAULT_EPISODES[domain]
        if self.episodes < 0:
            raise ConfigError("episodes must be non-negative")
        if self.variant == "shaping":
            if self.margin is None or self.margin <= 0:
                raise ConfigError("shaping variant needs a positive margin")
            if self.penalty is None:
                self.penalty = DEFAULT_PENALTY[domain]
        elif self.margin is not None or self.penalty is not None:
            raise ConfigError("margin/penalty only apply to the shaping variant")
        if self.variant == "safety" and not self.model_dir:
            raise ConfigError("safety variant needs model_dir")
        if self.variant != "safety" and self.model_dir:
            raise ConfigError("model_dir only applies to the safety variant")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]
        unknown = set(self.agent) - set(DdpgConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown agent settings {sorted(unknown)}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return cls(**data)

    def config_hash(self) -> str:
        """Hash of everything that affects results (output location and worker count excluded)."""
        d = asdict(self)
        d.pop("out_dir")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EpisodeRecord:
    episode: int
    seed: int
    variant: str
    ret: float
    violated: bool
    cum_violations: int
    steps: int

    def row(self) -> list[str]:
        return [
            str(self.episode),
            str(self.seed),
            self.variant,
            repr(float(self.ret)),
            str(int(self.violated)),
            str(self.cum_violations),
            str(self.steps),
        ]


@dataclass
class RunMetrics:
    seed: int
    config_hash: str
    eval_episodes: list[EpisodeRecord] = field(default_factory=list)
    train_episodes: list[EpisodeRecord] = field(default_factory=list)
    corrections: int = 0
    env_steps: int = 0


def shaped_reward(state_after: State, base_reward: float, margin: float, penalty: float, spec: TaskSpec) -> float:
    """Add ``penalty`` when any signal is closer than ``margin`` to its hard limit."""
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    distance = np.asarray(spec.hard_limits) - np.asarray(state_after.signals)
    return base_reward + penalty if bool(np.any(distance < margin)) else base_reward


def nearest_rank(values: Sequence[float], q: float) -> float:
    """Nearest-rank quantile: the ``ceil(q * n)``-th smallest value (1-based, at least 1)."""
    if not values:
        raise ValueError("no values")
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered) - 1e-12))
    return float(ordered[rank - 1])


def quartiles(values: Sequence[float]) -> tuple[float, float, float]:
    return nearest_rank(values, 0.25), nearest_rank(values, 0.5), nearest_rank(values, 0.75)


def write_csv(path: Path, records: Sequence[EpisodeRecord]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for rec in records:
        w.writerow(rec.row())
    path.write_text(buf.getvalue())


def read_csv(path: str | Path) -> list[EpisodeRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        return [
            EpisodeRecord(int(e), int(s), v, float(r), bool(int(viol)), int(c), int(n))
            for e, s, v, r, viol, c, n in reader
        ]


def _run_episode(env, agent: DdpgAgent, cfg: ExperimentConfig, spec: TaskSpec, safety, train: bool,
                 buffer: ReplayBuffer, rng: np.random.Generator) -> tuple[float, Termination, int, int]:
    state = env.reset()
    agent.noise.reset()
    ret, discount, steps, corrections = 0.0, 1.0, 0, 0
    while True:
        warming = train and agent.config.random_warmup and len(buffer) < agent.config.warmup
        action, corr = agent.act(state, explore=train, safety=safety, uniform=warming)
        if corr is not None and corr.active:
            corrections += 1
        res = env.step(action)
        reward = res.reward
        if cfg.variant == "shaping":
            reward = shaped_reward(res.next_state, reward, cfg.margin, cfg.penalty, spec)
        if train:
            done = res.termination in (Termination.CONSTRAINT_VIOLATION, Termination.TARGET_REACHED)
            buffer.add(
                Transition(state.obs, action, reward, res.next_state.obs, done, state.signals, res.next_state.signals)
            )
            if len(buffer) >= max(agent.config.warmup, agent.config.batch_size):
                agent.train_batch(buffer, rng, safety)
        ret += discount * reward
        discount *= spec.gamma
        steps += 1
        if res.done:
            return ret, res.termination, steps, corrections
        state = res.next_state


def run_seed(cfg: ExperimentConfig, seed: int) -> RunMetrics:
    """Alternate training and evaluation episodes for one seed."""
    train_env = make_task(cfg.task_id, seed=2 * seed)
    eval_env = make_task(cfg.task_id, seed=2 * seed + 1)
    spec = train_env.spec
    agent_cfg = DdpgConfig(**{"gamma": spec.gamma, **cfg.agent})
    agent = DdpgAgent(spec.state_dim, spec.action_dim, agent_cfg, make_rng(seed, 100))
    buffer = ReplayBuffer(agent_cfg.replay_capacity, spec.state_dim, spec.action_dim, spec.num_constraints)
    batch_rng = make_rng(seed, 101)
    safety = SafetyHook(load_models(cfg.model_dir)) if cfg.variant == "safety" else None
    if safety is not None and len(safety.models) != spec.num_constraints:
        raise ConfigError(f"{cfg.model_dir} has {len(safety.models)} models, task needs {spec.num_constraints}")
    metrics = RunMetrics(seed, cfg.config_hash())
    cum_eval = cum_train = 0
    for ep in range(cfg.episodes):
        for train in (True, False):
            env = train_env if train else eval_env
            ret, term, steps, corr = _run_episode(env, agent, cfg, spec, safety, train, buffer, batch_rng)
            violated = term is Termination.CONSTRAINT_VIOLATION
            metrics.corrections += corr
            metrics.env_steps += steps
            if train:
                cum_train += violated
                metrics.train_episodes.append(EpisodeRecord(ep, seed, cfg.variant, ret, violated, cum_train, steps))
            else:
                cum_eval += violated
                metrics.eval_episodes.append(EpisodeRecord(ep, seed, cfg.variant, ret, violated, cum_eval, steps))
        log.debug("seed %d episode %d: eval return %.3f, cum violations %d", seed, ep, ret, cum_eval)
    return metrics


def aggregate(runs: Sequence[RunMetrics]) -> dict:
    """Per-episode nearest-rank quartiles of eval return and cumulative violations across seeds."""
    n = min((len(r.eval_episodes) for r in runs), default=0)
    series: dict[str, list] = {k: [] for k in ("return", "cum_violations", "cum_env_steps")}
    cum_steps = {r.seed: 0 for r in runs}
    for ep in range(n):
        for r in runs:
            cum_steps[r.seed] += r.train_episodes[ep].steps + r.eval_episodes[ep].steps
        for key, values in (
            ("return", [r.eval_episodes[ep].ret for r in runs]),
            ("cum_violations", [r.eval_episodes[ep].cum_violations for r in runs]),
            ("cum_env_steps", list(cum_steps.values())),
        ):
            q1, med, q3 = quartiles(values)
            series[key].append({"episode": ep, "q1": q1, "median": med, "q3": q3})
    return {
        "seeds": [r.seed for r in runs],
        "config_hash": runs[0].config_hash if runs else None,
        "episodes": n,
        "series": series,
        "per_seed": [
            {
                "seed": r.seed,
                "eval_violations": r.eval_episodes[-1].cum_violations if r.eval_episodes else 0,
                "train_violations": r.train_episodes[-1].cum_violations if r.train_episodes else 0,
                "safety_corrections": r.corrections,
                "env_steps": r.env_steps,
            }
            for r in runs
        ],
    }


def run_experiment(cfg: ExperimentConfig) -> dict[int, RunMetrics]:
    """Run every seed, write per-seed CSVs plus ``aggregate.json``; returns metrics by seed."""
    if cfg.variant == "safety" and not Path(cfg.model_dir).is_dir():
        raise FileNotFoundError(f"model directory {cfg.model_dir} does not exist")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(cfg), sort_keys=True, indent=2))
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            runs = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        runs = [run_seed(cfg, s) for s in cfg.seeds]
    for r in runs:
        write_csv(out / f"metrics_seed{r.seed}.csv", r.eval_episodes)
        write_csv(out / f"train_seed{r.seed}.csv", r.train_episodes)
    (out / "aggregate.json").write_text(json.dumps(aggregate(runs), sort_keys=True, indent=2))
    return {r.seed: r for r in runs}


def run_shaping_sweep(
    task_id: str,
    margins: Sequence[float],
    seeds: Sequence[int],
    out_dir: str | Path,
    episodes: int | None = None,
    agent: dict | None = None,
    penalty: float | None = None,
    workers: int = 1,
) -> list[dict]:
    """Shaping runs per margin; reports final cumulative eval violations and marks the best margin."""
    if not margins:
        raise ValueError("margins must be non-empty")
    out = Path(out_dir)
    rows = []
    for m in margins:
        cfg = ExperimentConfig(
            task_id=task_id,
            variant="shaping",
            seeds=list(seeds),
            episodes=episodes,
            margin=float(m),
            penalty=penalty,
            out_dir=str(out / f"margin_{m:g}"),
            agent=dict(agent or {}),
            workers=workers,
        )
        runs = run_experiment(cfg)
        finals = [r.eval_episodes[-1].cum_violations if r.eval_episodes else 0 for r in runs.values()]
        q1, med, q3 = quartiles(finals)
        rows.append({"margin": float(m), "q1": q1, "median": med, "q3": q3, "finals": finals, "best": False})
    best = min(range(len(rows)), key=lambda k: (rows[k]["median"], rows[k]["margin"]))
    rows[best]["best"] = True
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("margin", "q1", "median", "q3", "best"))
    for r in rows:
        w.writerow((repr(r["margin"]), repr(r["q1"]), repr(r["median"]), repr(r["q3"]), int(r["best"])))
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(buf.getvalue())
    (out / "sweep.json").write_text(json.dumps(rows, sort_keys=True, indent=2))
    return rows


def pretrain_pipeline(
    task_id: str,
    episodes: int,
    out_dir: str | Path,
    seed: int = 0,
    epochs: int = 50,
    batch_size: int = 256,
    lr: float = 1e-3,
    save_dataset: bool = True,
) -> dict:
    """Collect a random-action dataset, fit the constraint models, write models and a report."""
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = make_task(task_id, seed=seed)
    dataset = collect_random_dataset(env, episodes, make_rng(seed, 200))
    if save_dataset:
        dataset.save(out / "dataset.jsonl")
    result = train_constraint_models(
        dataset, env.spec, epochs=epochs, batch_size=batch_size, lr=lr, rng=make_rng(seed, 201)
    )
    save_models(result.models, out, task_id)
    report = {
        "task_id": task_id,
        "seed": seed,
        "episodes": episodes,
        "dataset_size": len(dataset),
        "violating_transitions": int(np.sum(dataset.terminated & (dataset.next_signals > np.asarray(env.spec.hard_limits)).any(axis=1))),
        "signal_spans": dataset.signal_spans(),
        "train_mse": result.train_mse,
        "val_mse": result.val_mse,
        "zero_action_variance": result.zero_action_variance,
        "epochs": epochs,
        "batch_size": batch_size,
        "lr": lr,
    }
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2))
    return report
