"""Bundled deterministic text world.

Six rooms, objects at fixed locations, look-alike decoys next to some
objects, and three task families:

* ``find``   -- "Find the X and focus on it."
* ``avoid``  -- "Focus on the X; beware of look-alikes." (a decoy shares X's room
  and is listed first)
* ``fetch``  -- "Move the X to the C."

Scores: +1 on completion, -1 when focusing the wrong object, 0 at the step
cap. The cap is tight enough that a memoryless room-by-room search misses
the far rooms, so location memories change outcomes.
"""
from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .base import StepAfterDone, Task, UnknownTask

FAMILIES = ("find", "avoid", "fetch")

_FIND_RE = re.compile(r"^Find the (.+) and focus on it\.$")
_AVOID_RE = re.compile(r"^Focus on the (.+); beware of look-alikes\.$")
_FETCH_RE = re.compile(r"^Move the (.+) to the (.+)\.$")


def instruction_for(family: str, target: str, container: Optional[str] = None) -> str:
    if family == "find":
        return f"Find the {target} and focus on it."
    if family == "avoid":
        return f"Focus on the {target}; beware of look-alikes."
    if family == "fetch":
        return f"Move the {target} to the {container}."
    raise ValueError(f"unknown family {family!r}")


def parse_instruction(instruction: str) -> tuple[str, str, Optional[str]]:
    """(family, target, container) from an instruction string."""
    instruction = instruction.strip()
    if m := _FIND_RE.match(instruction):
        return "find", m.group(1), None
    if m := _AVOID_RE.match(instruction):
        return "avoid", m.group(1), None
    if m := _FETCH_RE.match(instruction):
        return "fetch", m.group(1), m.group(2)
    raise ValueError(f"not a toy instruction: {instruction!r}")


@dataclass(frozen=True)
class ToyWorld:
    rooms: tuple[str, ...]
    start_room: str
    max_steps: int
    locations: dict            # object -> room
    decoys: dict               # object -> decoy name (decoy sits in the same room)
    findables: tuple[str, ...]
    avoidables: tuple[str, ...]
    containers: tuple[str, ...]
    fillers: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "ToyWorld":
        return cls(rooms=tuple(d["rooms"]), start_room=d["start_room"], max_steps=int(d["max_steps"]),
                   locations=dict(d["locations"]), decoys=dict(d["decoys"]),
                   findables=tuple(d["findables"]), avoidables=tuple(d["avoidables"]),
                   containers=tuple(d["containers"]), fillers=tuple(d.get("fillers", ())))

    def to_dict(self) -> dict:
        return {"rooms": list(self.rooms), "start_room": self.start_room, "max_steps": self.max_steps,
                "locations": self.locations, "decoys": self.decoys, "findables": list(self.findables),
                "avoidables": list(self.avoidables), "containers": list(self.containers),
                "fillers": list(self.fillers)}

    @classmethod
    def default(cls) -> "ToyWorld":
        text = resources.files("regionmem").joinpath("data", "toy_world.json").read_text("utf-8")
        return cls.from_dict(json.loads(text))

    @classmethod
    def generate(cls, seed: int) -> "ToyWorld":
        """Same objects and rooms as the default world, locations reshuffled."""
        base = cls.default()
        rng = random.Random(seed)
        rooms = list(base.rooms)
        locations = {}
        for obj in sorted(base.locations):
            if obj in base.fillers:
                locations[obj] = base.locations[obj]
            else:
                locations[obj] = rng.choice(rooms)
        return cls(base.rooms, base.start_room, base.max_steps, locations, dict(base.decoys),
                   base.findables, base.avoidables, base.containers, base.fillers)

    def room_contents(self, room: str, removed: frozenset = frozenset()) -> list[str]:
        """Visible objects; decoys are listed before the object they imitate."""
        out = []
        for obj, where in self.locations.items():
            if where != room or obj in removed:
                continue
            if obj in self.decoys:
                out.append(self.decoys[obj])
            out.append(obj)
        return out


def generate_tasks(world: ToyWorld, per_family: int = 20, seed: int = 42,
                   shuffle: bool = True) -> list[Task]:
    rng = random.Random(seed)
    tasks: list[Task] = []
    for i in range(per_family):
        obj = world.findables[i % len(world.findables)]
        tasks.append(Task(f"find-{i:02d}", "find", instruction_for("find", obj), {"target": obj}))
    for i in range(per_family):
        obj = world.avoidables[i % len(world.avoidables)]
        tasks.append(Task(f"avoid-{i:02d}", "avoid", instruction_for("avoid", obj), {"target": obj}))
    for i in range(per_family):
        obj = rng.choice(world.findables)
        box = rng.choice(world.containers)
        tasks.append(Task(f"fetch-{i:02d}", "fetch", instruction_for("fetch", obj, box),
                          {"target": obj, "container": box}))
    if shuffle:
        rng.shuffle(tasks)
    return tasks


def default_tasks() -> list[Task]:
    text = resources.files("regionmem").joinpath("data", "toy_tasks.json").read_text("utf-8")
    return [Task.from_dict(d) for d in json.loads(text)]


def load_tasks(path) -> list[Task]:
    """JSON list or JSONL of {task_id, family, instruction, ...}."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        records = json.loads(text)
    else:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    return [Task.from_dict(r) for r in records]


def save_tasks(tasks, path) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in tasks], indent=1) + "\n", encoding="utf-8")


@dataclass
class _Episode:
    task: Task
    family: str
    target: str
    container: Optional[str]
    room: str
    holding: Optional[str] = None
    removed: set = field(default_factory=set)
    steps: int = 0
    done: bool = False


class ToyEnv:
    """EnvAdapter over a ToyWorld. Tasks resolve by id; unknown ids raise
    UnknownTask. Use ``add_task`` to register ad-hoc tasks."""

    min_score = -1.0

    def __init__(self, world: Optional[ToyWorld] = None, tasks=None):
        self.world = world or ToyWorld.default()
        self.max_steps = self.world.max_steps
        self.tasks = {t.task_id: t for t in (tasks if tasks is not None else default_tasks())}
        self._ep: Optional[_Episode] = None

    def add_task(self, task: Task) -> None:
        self.tasks[task.task_id] = task

    def reset(self, task_id: str) -> str:
        if task_id not in self.tasks:
            raise UnknownTask(task_id)
        task = self.tasks[task_id]
        family, target, container = parse_instruction(task.instruction)
        self._ep = _Episode(task, family, target, container, self.world.start_room)
        return f"Task: {task.instruction}\n{self._observe()}"

    def _available(self) -> list[str]:
        ep = self._ep
        actions = [f"go to {r}" for r in self.world.rooms if r != ep.room]
        visible = self.world.room_contents(ep.room, frozenset(ep.removed))
        actions += [f"focus on {o}" for o in visible]
        if ep.holding is None:
            actions += [f"pick up {o}" for o in visible if o not in self.world.containers]
        else:
            actions += [f"put {ep.holding} in {c}" for c in visible if c in self.world.containers]
        actions.append("look around")
        return actions

    def _observe(self) -> str:
        ep = self._ep
        visible = self.world.room_contents(ep.room, frozenset(ep.removed))
        listing = ", ".join(visible) if visible else "nothing"
        holding = ep.holding or "nothing"
        actions = "\n".join(self._available())
        return (f"You are in the {ep.room}. Visible objects: {listing}. "
                f"You are holding: {holding}.\n=== Available Actions ===\n{actions}")

    def step(self, action: str) -> tuple[str, bool, Optional[float]]:
        ep = self._ep
        if ep is None:
            raise RuntimeError("reset() before step()")
        if ep.done:
            raise StepAfterDone(ep.task.task_id)
        action = action.strip()
        ep.steps += 1
        score: Optional[float] = None
        if action not in self._available():
            msg = "Nothing happens. That action is not available."
        elif action.startswith("go to "):
            ep.room = action[len("go to "):]
            msg = f"You go to the {ep.room}."
        elif action.startswith("focus on "):
            obj = action[len("focus on "):]
            ok = ep.family in ("find", "avoid") and obj == ep.target
            score = 1.0 if ok else -1.0
            msg = f"You focus on the {obj}. " + ("Task completed." if ok else "That was the wrong object. Task failed.")
        elif action.startswith("pick up "):
            obj = action[len("pick up "):]
            ep.holding = obj
            ep.removed.add(obj)
            msg = f"You pick up the {obj}."
        elif action.startswith("put "):
            obj, box = action[len("put "):].split(" in ", 1)
            ep.holding = None
            if ep.family == "fetch" and obj == ep.target and box == ep.container:
                score = 1.0
                msg = f"You put the {obj} in the {box}. Task completed."
            else:
                msg = f"You put the {obj} in the {box}."
        else:
            msg = "You look around."
        if score is None and ep.steps >= self.max_steps:
            score = 0.0
            msg = f"{msg}\n{self._observe().splitlines()[0]} You have run out of steps."
        if score is not None:
            ep.done = True
            return msg, True, score
        return f"{msg}\n{self._observe()}", False, None
