"""Small constructed replacement sets on the default toy world, used by the
reward tests, the training harness examples and ``reward-eval`` demos."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

from .env.base import Task
from .env.scripted import avoid_draft, location_draft
from .env.toy import instruction_for
from .memory import SEMANTIC, EntryDraft, MemoryEntry, dumps_jsonl, entry_to_dict, format_entry_id


def fixture_entry(draft: EntryDraft, counter: int, session: int = 0) -> MemoryEntry:
    return MemoryEntry(id=format_entry_id(session, counter), kind=draft.kind, name=draft.name,
                       summary=draft.summary, details=draft.details, steps=draft.steps,
                       proc_type=draft.proc_type, created_session=session)


def thermometer_tasks() -> list[Task]:
    return [
        Task("eval-find-thermometer", "find", instruction_for("find", "thermometer"),
             {"target": "thermometer"}),
        Task("eval-fetch-thermometer", "fetch", instruction_for("fetch", "thermometer", "red box"),
             {"target": "thermometer", "container": "red box"}),
    ]


FACT = location_draft("thermometer", "bathroom")
HARMFUL = EntryDraft(SEMANTIC, "find_thermometer_tip", "Find the thermometer and focus on it",
                     details="The thermometer is in the kitchen.")


def load_bearing() -> list[MemoryEntry]:
    return [fixture_entry(FACT, 0)]


def duplicate_pair() -> list[MemoryEntry]:
    return [fixture_entry(FACT, 0), fixture_entry(FACT, 1)]


def harmful_pair() -> list[MemoryEntry]:
    return [fixture_entry(FACT, 0), fixture_entry(HARMFUL, 1)]


FAR_OBJECTS = (("thermometer", "bathroom"), ("screwdriver", "bathroom"), ("magnifier", "bedroom"),
               ("compass", "bedroom"), ("seed packet", "greenhouse"), ("battery", "workshop"))


def mixed_set(size: int = 12) -> list[MemoryEntry]:
    """Location facts for far objects, duplicates, decoy warnings and one
    misleading fact; truncated to ``size`` (at most 12)."""
    drafts = [location_draft(o, r) for o, r in FAR_OBJECTS]
    drafts += [location_draft("thermometer", "bathroom"), location_draft("magnifier", "bedroom"),
               avoid_draft("paper key", "key"), avoid_draft("chocolate coin", "coin"),
               EntryDraft(SEMANTIC, "compass_tip", "Find the compass and focus on it",
                          details="The compass is in the greenhouse."),
               location_draft("key", "bathroom")]
    if not 1 <= size <= len(drafts):
        raise ValueError(f"size must be in 1..{len(drafts)}")
    return [fixture_entry(d, i) for i, d in enumerate(drafts[:size])]


def mixed_tasks() -> list[Task]:
    tasks = [Task(f"eval-find-{o.replace(' ', '-')}", "find", instruction_for("find", o), {"target": o})
             for o, _ in FAR_OBJECTS]
    tasks.append(Task("eval-avoid-key", "avoid", instruction_for("avoid", "key"), {"target": "key"}))
    tasks.append(Task("eval-avoid-coin", "avoid", instruction_for("avoid", "coin"), {"target": "coin"}))
    return tasks


def write_entries(entries: Sequence[MemoryEntry], path) -> None:
    Path(path).write_text(dumps_jsonl(entry_to_dict(e) for e in entries), encoding="utf-8")


def thermometer_pool_tasks(copies: int = 2) -> list[Task]:
    """Pool-side tasks about the thermometer, disjoint from the eval ids."""
    return [Task(f"pool-find-thermometer-{i}", "find", instruction_for("find", "thermometer"),
                 {"target": "thermometer"}) for i in range(copies)]
