"""Random-action transition datasets and the per-constraint sensitivity networks.

Each constraint ``i`` gets a small state-fed network ``g_i`` such that
``c_i(s') ~= c_i(s) + g_i(s) . a``; the networks are fit by minibatch Adam on
the squared one-step residual.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .envs import TaskSpec, Termination
from .numcore import Adam, Mlp, backward_cached, forward_cached, mlp_forward, mlp_init

log = logging.getLogger(__name__)

G_HIDDEN_UNITS = 10


class TrainingError(RuntimeError):
    pass


@dataclass
class PretrainDataset:
    """Column-major storage of ``(s, a, s')`` tuples with their signals."""

    task_id: str
    episode_count: int
    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    signals: np.ndarray
    next_signals: np.ndarray
    terminated: np.ndarray

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    def records(self) -> Iterator[dict]:
        for j in range(len(self)):
            yield {
                "s": self.obs[j].tolist(),
                "a": self.actions[j].tolist(),
                "s_next": self.next_obs[j].tolist(),
                "signals": self.signals[j].tolist(),
                "signals_next": self.next_signals[j].tolist(),
                "terminated": bool(self.terminated[j]),
            }

    def save(self, path: str | Path) -> None:
        """Newline-delimited JSON; the first line is a header with task metadata."""
        path = Path(path)
        with path.open("w") as fh:
            fh.write(json.dumps({"task_id": self.task_id, "episode_count": self.episode_count}) + "\n")
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PretrainDataset":
        with Path(path).open() as fh:
            header = json.loads(fh.readline())
            recs = [json.loads(line) for line in fh if line.strip()]
        return cls.from_records(header["task_id"], header["episode_count"], recs)

    @classmethod
    def from_records(cls, task_id: str, episode_count: int, recs: Sequence[dict]) -> "PretrainDataset":
        if not recs:
            raise ValueError("dataset has no records")

        def col(key: str) -> np.ndarray:
            return np.array([r[key] for r in recs], dtype=np.float64)

        return cls(
            task_id=task_id,
            episode_count=episode_count,
            obs=col("s"),
            actions=col("a"),
            next_obs=col("s_next"),
            signals=col("signals"),
            next_signals=col("signals_next"),
            terminated=np.array([bool(r["terminated"]) for r in recs]),
        )

    def signal_spans(self) -> list[tuple[float, float]]:
        both = np.concatenate([self.signals, self.next_signals], axis=0)
        return [(float(lo), float(hi)) for lo, hi in zip(both.min(axis=0), both.max(axis=0))]


def collect_random_dataset(env, episodes: int, rng: np.random.Generator) -> PretrainDataset:
    """Uniformly random actions from random starts until time limit or violation.

    The violating transition that ends an episode is kept.
    """
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    d = env.spec.action_dim
    obs, acts, nobs, sig, nsig, term = [], [], [], [], [], []
    for _ in range(episodes):
        state = env.reset()
        while True:
            a = rng.uniform(-1.0, 1.0, size=d)
            res = env.step(a)
            obs.append(state.obs)
            acts.append(a)
            nobs.append(res.next_state.obs)
            sig.append(state.signals)
            nsig.append(res.next_state.signals)
            term.append(res.termination is not Termination.NONE)
            if res.done:
                break
            state = res.next_state
    return PretrainDataset(
        task_id=env.spec.task_id,
        episode_count=episodes,
        obs=np.array(obs),
        actions=np.array(acts),
        next_obs=np.array(nobs),
        signals=np.array(sig),
        next_signals=np.array(nsig),
        terminated=np.array(term),
    )


@dataclass
class ConstraintModel:
    index: int
    net: Mlp
    threshold: float

    def sensitivity(self, obs: np.ndarray) -> np.ndarray:
        return mlp_forward(self.net, obs)

    def to_dict(self, task_id: str | None = None) -> dict:
        out = self.net.to_dict()
        out.update({"constraint_index": self.index, "threshold": self.threshold})
        if task_id is not None:
            out["task_id"] = task_id
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ConstraintModel":
        return cls(int(data["constraint_index"]), Mlp.from_dict(data), float(data["threshold"]))


@dataclass
class TrainingResult:
    models: list[ConstraintModel]
    train_mse: list[float]
    val_mse: list[float]
    loss_history: list[list[float]] = field(default_factory=list)
    zero_action_variance: bool = False


def _split(n: int, rng: np.random.Generator, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    if n - n_val < 1:
        n_val = 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _residual(net: Mlp, obs: np.ndarray, actions: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return delta - np.einsum("bd,bd->b", mlp_forward(net, obs), actions)


def train_constraint_models(
    dataset: PretrainDataset,
    spec: TaskSpec,
    epochs: int = 50,
    batch_size: int = 256,
    lr: float = 1e-3,
    rng: np.random.Generator | None = None,
    val_fraction: float = 0.1,
    hidden_units: int = G_HIDDEN_UNITS,
) -> TrainingResult:
    """Fit one sensitivity network per constraint on ``c(s') - c(s) - g(s).a``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if dataset.actions.shape[1] != spec.action_dim:
        raise ValueError("dataset action dimension does not match the task")
    if rng is None:
        rng = np.random.default_rng(0)
    train_idx, val_idx = _split(len(dataset), rng, val_fraction)
    zero_var = bool(np.all(dataset.actions.var(axis=0) == 0.0))
    if zero_var:
        log.warning("dataset has zero action variance; sensitivities are unidentifiable")

    obs, acts = dataset.obs, dataset.actions
    deltas = dataset.next_signals - dataset.signals
    result = TrainingResult([], [], [], [], zero_var)
    for i in range(spec.num_constraints):
        net = mlp_init([spec.state_dim, hidden_units, spec.action_dim], "tanh", rng)
        opt = Adam(learning_rate=lr)
        params = net.params()
        history = []
        for epoch in range(epochs):
            order = train_idx[rng.permutation(train_idx.size)]
            total = 0.0
            for start in range(0, order.size, batch_size):
                b = order[start : start + batch_size]
                xb, ab, yb = obs[b], acts[b], deltas[b, i]
                out, cache = forward_cached(net, xb)
                r = yb - np.einsum("bd,bd->b", out, ab)
                total += float(r @ r)
                # d/d(out) of mean(r^2)
                upstream = (-2.0 / b.size) * r[:, None] * ab
                grads, _ = backward_cached(net, cache, upstream, need_input_grad=False)
                opt.step(params, grads)
            epoch_mse = total / max(order.size, 1)
            if not np.isfinite(epoch_mse):
                raise TrainingError(
                    f"constraint {i}: non-finite loss at epoch {epoch} (lr={lr}, batch={batch_size})"
                )
            history.append(epoch_mse)
        train_res = _residual(net, obs[train_idx], acts[train_idx], deltas[train_idx, i])
        train_mse = float(np.mean(train_res**2))
        if val_idx.size:
            val_res = _residual(net, obs[val_idx], acts[val_idx], deltas[val_idx, i])
            val_mse = float(np.mean(val_res**2))
        else:
            val_mse = float("nan")
        log.info("constraint %d: train mse %.3e, val mse %.3e", i, train_mse, val_mse)
        result.models.append(ConstraintModel(i, net, float(spec.thresholds[i])))
        result.train_mse.append(train_mse)
        result.val_mse.append(val_mse)
        result.loss_history.append(history)
    return result


def predict_sensitivity(models: Sequence[ConstraintModel], obs: np.ndarray) -> np.ndarray:
    """Stack of ``g_i(s)`` rows: shape ``(K, action_dim)``, or ``(B, K, action_dim)`` for a batch."""
    obs = np.asarray(obs, dtype=np.float64)
    rows = [m.sensitivity(obs) for m in models]
    return np.stack(rows, axis=-2)


def predicted_next_signal(
    models: Sequence[ConstraintModel], obs: np.ndarray, signals: np.ndarray, action: np.ndarray, i: int
) -> float:
    if not 0 <= i < len(models):
        raise IndexError(f"constraint index {i} out of range for {len(models)} models")
    g = models[i].sensitivity(np.asarray(obs, dtype=np.float64))
    return float(signals[i] + g @ np.asarray(action, dtype=np.float64))


def thresholds_of(models: Sequence[ConstraintModel]) -> np.ndarray:
    return np.array([m.threshold for m in models])


def save_models(models: Sequence[ConstraintModel], directory: str | Path, task_id: str) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in models:
        p = directory / f"model_{m.index}.json"
        p.write_text(json.dumps(m.to_dict(task_id), sort_keys=True))
        paths.append(p)
    return paths


def load_models(directory: str | Path) -> list[ConstraintModel]:
    directory = Path(directory)
    paths = sorted(directory.glob("model_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise FileNotFoundError(f"no model_*.json files in {directory}")
    models = [ConstraintModel.from_dict(json.loads(p.read_text())) for p in paths]
    if [m.index for m in models] != list(range(len(models))):
        raise ValueError(f"constraint indices in {directory} are not contiguous from 0")
    return models
