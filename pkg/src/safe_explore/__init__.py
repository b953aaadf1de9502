"""Safe exploration for continuous control: a closed-form safety layer over DDPG."""

from .envs import TASK_IDS, Termination, make_task, task_spec
from .safety_layer import CorrectionResult, correct_action, qp_oracle

__all__ = [
    "TASK_IDS",
    "CorrectionResult",
    "Termination",
    "correct_action",
    "make_task",
    "qp_oracle",
    "task_spec",
]
__version__ = "0.1.0"
