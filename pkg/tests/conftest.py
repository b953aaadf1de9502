from __future__ import annotations

import numpy as np

from safe_explore.envs import BALL_DAMPING, DT, task_spec
from safe_explore.numcore import make_rng, mlp_init
from safe_explore.safety_model import ConstraintModel

BALL_GAIN = DT * sum(BALL_DAMPING**k for k in range(1, 5))


def constant_models(task_id: str, rows: np.ndarray) -> list[ConstraintModel]:
    """Sensitivity networks whose output is the fixed row ``rows[i]`` for every state."""
    spec = task_spec(task_id)
    models = []
    for i, row in enumerate(np.asarray(rows, dtype=np.float64)):
        net = mlp_init([spec.state_dim, 10, spec.action_dim], "tanh", make_rng(i))
        for p in net.params():
            p[...] = 0.0
        net.biases[-1][...] = row
        models.append(ConstraintModel(i, net, float(spec.thresholds[i])))
    return models


def perfect_ball_models(dim: int) -> list[ConstraintModel]:
    """The Ball signal change is exactly BALL_GAIN * a along each axis."""
    rows = []
    for j in range(dim):
        for sign in (1.0, -1.0):
            r = np.zeros(dim)
            r[j] = sign * BALL_GAIN
            rows.append(r)
    return constant_models(f"Ball{dim}D", np.array(rows))


# one line per acceptance criterion, echoed at the end of the pytest run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
