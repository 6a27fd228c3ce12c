"""Environment adapter interface shared by the episode loop."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol


class StepAfterDone(RuntimeError):
    pass


class UnknownTask(KeyError):
    pass


@dataclass(frozen=True)
class Task:
    task_id: str
    family: str
    instruction: str
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "family": self.family,
                "instruction": self.instruction, **self.extra}

    @classmethod
    def from_dict(cls, d: dict) -> "Task":
        extra = {k: v for k, v in d.items() if k not in ("task_id", "family", "instruction")}
        return cls(d["task_id"], d["family"], d["instruction"], extra)


class EnvAdapter(Protocol):
    """reset(task_id) -> observation; step(action) -> (observation, done, score).

    ``score`` is None until ``done``; stepping after done raises StepAfterDone.
    """

    max_steps: int
    min_score: float

    def reset(self, task_id: str) -> str: ...

    def step(self, action: str) -> tuple[str, bool, Optional[float]]: ...


class _ExternalAdapter:
    """Placeholder for a real benchmark. Wire it by subclassing and filling
    in reset/step against the benchmark's own Python API."""

    name = "external"
    max_steps = 50
    min_score = -1.0

    def reset(self, task_id: str) -> str:
        raise NotImplementedError(f"{self.name} adapter is not bundled; install and wire the benchmark")

    def step(self, action: str):
        raise NotImplementedError(f"{self.name} adapter is not bundled; install and wire the benchmark")


class AlfworldAdapter(_ExternalAdapter):
    name, max_steps = "alfworld", 50


class ScienceWorldAdapter(_ExternalAdapter):
    name, max_steps = "scienceworld", 100


class WebArenaAdapter(_ExternalAdapter):
    name, max_steps = "webarena", 300
