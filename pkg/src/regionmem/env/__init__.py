from .base import (AlfworldAdapter, EnvAdapter, ScienceWorldAdapter, StepAfterDone, Task,
                   UnknownTask, WebArenaAdapter)
from .toy import ToyEnv, ToyWorld, default_tasks, generate_tasks, load_tasks, save_tasks

__all__ = [
    "AlfworldAdapter", "EnvAdapter", "ScienceWorldAdapter", "StepAfterDone", "Task", "UnknownTask",
    "WebArenaAdapter", "ToyEnv", "ToyWorld", "default_tasks", "generate_tasks", "load_tasks",
    "save_tasks",
]
