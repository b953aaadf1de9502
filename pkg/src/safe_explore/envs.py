"""Ball and Spaceship point-mass tasks with per-state safety signals.

Every task exposes ``K`` safety signals that are affine in position. Each
signal carries two bounds: the slack threshold ``C_i`` that the safety layer
enforces, and the hard physical limit whose crossing ends the episode.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numcore import make_rng

DT = 0.05
GAMMA = 0.99
BALL_DAMPING = 0.95
BALL_HOLD_STEPS = 4
BALL_EPISODE_SECONDS = 30.0
BALL_RELOCATE_SECONDS = 2.0
BALL_TARGET_NOISE_VAR = 0.05
SHIP_DAMPING = 0.8
SHIP_MASS = 1.0
SHIP_FORCE = 1.0
SHIP_WALL_GAP = 0.05
SHIP_TARGET_RADIUS = 0.05
CORRIDOR_WIDTH = 1.0
CORRIDOR_LENGTH = 3.0
CORRIDOR_TARGET = (0.5, 3.0)
ARENA_TARGET = (-0.6, 0.0)
ARENA_NORMALS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])

TASK_IDS = ("Ball1D", "Ball3D", "SpaceshipCorridor", "SpaceshipArena")


class Termination(str, enum.Enum):
    NONE = "none"
    TIME_LIMIT = "time_limit"
    CONSTRAINT_VIOLATION = "constraint_violation"
    TARGET_REACHED = "target_reached"


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    dt: float
    episode_limit_steps: int
    action_dim: int
    state_dim: int
    num_constraints: int
    thresholds: tuple[float, ...]
    hard_limits: tuple[float, ...]
    gamma: float = GAMMA

    @property
    def domain(self) -> str:
        return "ball" if self.task_id.startswith("Ball") else "spaceship"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class State:
    """Network-facing observation plus the safety signals of the current position."""

    obs: np.ndarray
    signals: np.ndarray


@dataclass
class StepResult:
    next_state: State
    reward: float
    termination: Termination
    info: dict = field(default_factory=dict)

    @property
    def done(self) -> bool:
        return self.termination is not Termination.NONE


def _affine_signals(normals: np.ndarray, position: np.ndarray) -> np.ndarray:
    return normals @ position


class _Env:
    spec: TaskSpec
    normals: np.ndarray

    def __init__(self, seed: int = 0) -> None:
        self._seed_streams(seed)
        self._terminated = True
        self.t = 0

    def _seed_streams(self, seed: int) -> None:
        self.init_rng = make_rng(seed, 0)
        self.target_rng = make_rng(seed, 1)
        self.noise_rng = make_rng(seed, 2)

    def safety_signals(self, state_or_position) -> np.ndarray:
        """Signals for a ``State`` (recomputed from its obs) or a raw position."""
        if isinstance(state_or_position, State):
            position = self.position_from_obs(state_or_position.obs)
        else:
            position = np.asarray(state_or_position, dtype=np.float64)
        return _affine_signals(self.normals, position)

    def position_from_obs(self, obs: np.ndarray) -> np.ndarray:
        return np.asarray(obs, dtype=np.float64)[: self.normals.shape[1]]

    def describe(self) -> str:
        return self.spec.to_json()

    def _check_action(self, action) -> np.ndarray:
        if self._terminated:
            raise RuntimeError("step() called on a terminated episode; call reset() first")
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (self.spec.action_dim,):
            raise ValueError(f"action shape {a.shape} != ({self.spec.action_dim},)")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"non-finite action {a}")
        return np.clip(a, -1.0, 1.0)

    def _hard_violation(self, signals: np.ndarray) -> bool:
        return bool(np.any(signals > np.asarray(self.spec.hard_limits)))

    def get_snapshot(self) -> dict:
        """Full simulator state, including RNG streams, for exact re-simulation."""
        return {
            "physics": {k: np.copy(v) for k, v in self._physics().items()},
            "t": self.t,
            "terminated": self._terminated,
            "rngs": [r.bit_generator.state for r in (self.init_rng, self.target_rng, self.noise_rng)],
        }

    def set_snapshot(self, snap: dict) -> None:
        for k, v in snap["physics"].items():
            setattr(self, k, np.copy(v))
        self.t = snap["t"]
        self._terminated = snap["terminated"]
        for r, st in zip((self.init_rng, self.target_rng, self.noise_rng), snap["rngs"]):
            r.bit_generator.state = st

    def _physics(self) -> dict:
        raise NotImplementedError


class BallEnv(_Env):
    """Velocity-controlled ball in the unit cube chasing a relocating target.

    One action sets the ball velocity, which is then held (with damping) for
    four simulation steps.
    """

    def __init__(self, dim: int, seed: int = 0) -> None:
        if dim not in (1, 3):
            raise ValueError(f"Ball task dimension must be 1 or 3, got {dim}")
        self.dim = dim
        sim_steps = int(round(BALL_EPISODE_SECONDS / DT))
        self.relocate_every = math.ceil(BALL_RELOCATE_SECONDS / (BALL_HOLD_STEPS * DT) - 1e-9)
        # signal order per axis j: (x_j, -x_j)
        self.normals = np.array([sign * e for e in np.eye(dim) for sign in (1.0, -1.0)])
        self.spec = TaskSpec(
            task_id=f"Ball{dim}D",
            dt=DT,
            episode_limit_steps=sim_steps // BALL_HOLD_STEPS,
            action_dim=dim,
            state_dim=3 * dim,
            num_constraints=2 * dim,
            thresholds=(0.9, -0.1) * dim,
            hard_limits=(1.0, 0.0) * dim,
        )
        self.position = np.full(dim, 0.5)
        self.velocity = np.zeros(dim)
        self.target = np.full(dim, 0.5)
        super().__init__(seed)

    def _physics(self) -> dict:
        return {"position": self.position, "velocity": self.velocity, "target": self.target}

    def _observe(self) -> State:
        noise = self.noise_rng.normal(0.0, math.sqrt(BALL_TARGET_NOISE_VAR), size=self.dim)
        obs = np.concatenate([self.position, self.velocity, self.target + noise])
        return State(obs, _affine_signals(self.normals, self.position))

    def reset(self, seed: int | None = None) -> State:
        if seed is not None:
            self._seed_streams(seed)
        self.position = self.init_rng.uniform(0.1, 0.9, size=self.dim)
        self.velocity = np.zeros(self.dim)
        self.target = self.target_rng.uniform(0.2, 0.8, size=self.dim)
        self.t = 0
        self._terminated = False
        return self._observe()

    def reward(self, position: np.ndarray, target: np.ndarray) -> float:
        return max(1.0 - 10.0 * float(np.sum((position - target) ** 2)), 0.0)

    def step(self, action) -> StepResult:
        a = self._check_action(action)
        v = a
        # motion is monotone within a hold, so checking the cube once at the end
        # is equivalent to checking every sub-step
        for _ in range(BALL_HOLD_STEPS):
            v = BALL_DAMPING * v
            self.position = self.position + v * DT
        self.velocity = v
        violated = bool(np.any(self.position < 0.0) or np.any(self.position > 1.0))
        reward = self.reward(self.position, self.target)
        info = {"position": self.position.copy(), "target": self.target.copy()}
        self.t += 1
        if violated:
            term = Termination.CONSTRAINT_VIOLATION
        elif self.t >= self.spec.episode_limit_steps:
            term = Termination.TIME_LIMIT
        else:
            term = Termination.NONE
        if self.t % self.relocate_every == 0:
            self.target = self.target_rng.uniform(0.2, 0.8, size=self.dim)
        self._terminated = term is not Termination.NONE
        return StepResult(self._observe(), reward, term, info)


class SpaceshipEnv(_Env):
    """Force-controlled point ship between walls; sparse reward at a fixed target."""

    def __init__(self, arena: bool, seed: int = 0) -> None:
        self.arena = arena
        if arena:
            self.normals = ARENA_NORMALS.copy()
            thresholds = (1.0 - SHIP_WALL_GAP,) * 4
            hard = (1.0,) * 4
            self.goal = np.array(ARENA_TARGET)
            seconds = 45.0
        else:
            self.normals = np.array([[1.0, 0.0], [-1.0, 0.0]])
            thresholds = (CORRIDOR_WIDTH - SHIP_WALL_GAP, -SHIP_WALL_GAP)
            hard = (CORRIDOR_WIDTH, 0.0)
            self.goal = np.array(CORRIDOR_TARGET)
            seconds = 15.0
        self.spec = TaskSpec(
            task_id="SpaceshipArena" if arena else "SpaceshipCorridor",
            dt=DT,
            episode_limit_steps=int(round(seconds / DT)),
            action_dim=2,
            state_dim=4,
            num_constraints=len(thresholds),
            thresholds=thresholds,
            hard_limits=hard,
        )
        self.position = np.zeros(2)
        self.velocity = np.zeros(2)
        super().__init__(seed)

    def _physics(self) -> dict:
        return {"position": self.position, "velocity": self.velocity}

    def _observe(self) -> State:
        obs = np.concatenate([self.position, self.velocity])
        return State(obs, _affine_signals(self.normals, self.position))

    def _sample_start(self) -> np.ndarray:
        rng = self.init_rng
        if not self.arena:
            x = rng.uniform(SHIP_WALL_GAP, CORRIDOR_WIDTH - SHIP_WALL_GAP)
            y = rng.uniform(0.0, CORRIDOR_LENGTH / 3.0)
            return np.array([x, y])
        # right-most third of the slack diamond, by rejection
        limit = 1.0 - SHIP_WALL_GAP
        while True:
            p = np.array([rng.uniform(limit / 3.0, limit), rng.uniform(-limit, limit)])
            if abs(p[0]) + abs(p[1]) <= limit:
                return p

    def reset(self, seed: int | None = None) -> State:
        if seed is not None:
            self._seed_streams(seed)
        self.position = self._sample_start()
        self.velocity = np.zeros(2)
        self.t = 0
        self._terminated = False
        return self._observe()

    def step(self, action) -> StepResult:
        a = self._check_action(action)
        accel = SHIP_FORCE * a / SHIP_MASS
        self.velocity = SHIP_DAMPING * self.velocity + accel * DT
        self.position = self.position + self.velocity * DT
        self.t += 1
        state = self._observe()
        reward = 0.0
        if self._hard_violation(state.signals):
            term = Termination.CONSTRAINT_VIOLATION
        elif float(np.linalg.norm(self.position - self.goal)) <= SHIP_TARGET_RADIUS:
            term = Termination.TARGET_REACHED
            reward = 1000.0
        elif self.t >= self.spec.episode_limit_steps:
            term = Termination.TIME_LIMIT
        else:
            term = Termination.NONE
        self._terminated = term is not Termination.NONE
        info = {"position": self.position.copy(), "target": self.goal.copy()}
        return StepResult(state, reward, term, info)


def make_task(task_id: str, seed: int = 0) -> _Env:
    if task_id == "Ball1D":
        return BallEnv(1, seed)
    if task_id == "Ball3D":
        return BallEnv(3, seed)
    if task_id == "SpaceshipCorridor":
        return SpaceshipEnv(arena=False, seed=seed)
    if task_id == "SpaceshipArena":
        return SpaceshipEnv(arena=True, seed=seed)
    raise ValueError(f"unknown task {task_id!r}; expected one of {TASK_IDS}")


def task_spec(task_id: str) -> TaskSpec:
    return make_task(task_id).spec
