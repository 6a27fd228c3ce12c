"""Deterministic stand-ins for the task agent and the writer LLM on the toy
world. Both read the same plain-text facts:

    The OBJ is in the ROOM.
    The OBJ is not in the ROOM, ROOM, or ROOM.
    Never focus on the DECOY; ...
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..memory import PROCEDURAL, SEMANTIC, EntryDraft
from ..retrieval import render_insert_block
from .toy import parse_instruction

LOCATION_RE = re.compile(r"\b[Tt]he ([a-z][a-z ]*?) is in the ([a-z]+)\.")
EXCLUSION_RE = re.compile(r"\b[Tt]he ([a-z][a-z ]*?) is not in the ([a-z ,]+?)\.")
AVOID_RE = re.compile(r"\b[Nn]ever focus on the ([a-z][a-z ]*?)[;.,]")
_ROOM_RE = re.compile(r"You are in the ([a-z ]+?)\. Visible objects: (.*?)\. You are holding: (.*?)\.")
_ACTIONS_HEADER = "=== Available Actions ==="


@dataclass
class MemoryFacts:
    locations: dict = field(default_factory=dict)   # first fact wins
    exclusions: dict = field(default_factory=dict)  # object -> set of rooms
    avoid: set = field(default_factory=set)


def split_rooms(text: str) -> list[str]:
    parts = re.split(r",\s*(?:or\s+)?|\s+or\s+", text)
    return [re.sub(r"^the\s+", "", p.strip()) for p in parts if p.strip()]


def parse_memory_facts(text: str) -> MemoryFacts:
    facts = MemoryFacts()
    for obj, room in LOCATION_RE.findall(text):
        facts.locations.setdefault(obj, room)
    for obj, rooms in EXCLUSION_RE.findall(text):
        facts.exclusions.setdefault(obj, set()).update(split_rooms(rooms))
    facts.avoid.update(AVOID_RE.findall(text))
    return facts


def join_rooms(rooms: Sequence[str]) -> str:
    rooms = list(rooms)
    if len(rooms) == 1:
        return rooms[0]
    if len(rooms) == 2:
        return f"{rooms[0]} or {rooms[1]}"
    return ", ".join(rooms[:-1]) + f", or {rooms[-1]}"


def parse_room_observation(obs: str) -> Optional[tuple[str, list[str], Optional[str]]]:
    m = _ROOM_RE.search(obs)
    if not m:
        return None
    room, listing, holding = m.groups()
    visible = [] if listing == "nothing" else listing.split(", ")
    return room, visible, (None if holding == "nothing" else holding)


def _matches(target: str, obj: str) -> bool:
    return re.search(r"\b%s\b" % re.escape(target), obj) is not None


class ScriptedTaskAgent:
    """Rule policy for the toy world.

    Location facts are followed in panel order (first one wins); avoided
    names are never focused; otherwise rooms are searched in canonical order,
    skipping rooms a memory says the target is not in.
    """

    def __init__(self, rooms: Sequence[str]):
        self.rooms = list(rooms)
        self.reset("")

    def reset(self, instruction: str) -> None:
        self.instruction = instruction
        self.goal = parse_instruction(instruction) if instruction else None
        self.visited: set[str] = set()
        self.seen: dict[str, str] = {}
        self.tried_memory: set[str] = set()

    def act(self, observation: str, memory: str = "") -> str:
        if self.goal is None:
            m = re.search(r"^Task: (.+)$", observation, re.M)
            if m:
                self.reset(m.group(1))
        parsed = parse_room_observation(observation)
        if parsed is None or self.goal is None:
            return "look around"
        room, visible, holding = parsed
        self.visited.add(room)
        for obj in visible:
            self.seen.setdefault(obj, room)
        facts = parse_memory_facts(memory or "")
        family, target, container = self.goal

        if family == "fetch" and holding is not None:
            if container in visible:
                return f"put {holding} in {container}"
            return self._go_towards(container, room, facts)

        candidates = [o for o in visible if _matches(target, o) and o not in facts.avoid]
        if candidates:
            verb = "pick up" if family == "fetch" else "focus on"
            return f"{verb} {candidates[0]}"
        return self._go_towards(target, room, facts)

    def _go_towards(self, obj: str, room: str, facts: MemoryFacts) -> str:
        remembered = facts.locations.get(obj)
        if remembered and obj not in self.tried_memory:
            self.tried_memory.add(obj)
            if remembered != room and remembered in self.rooms:
                return f"go to {remembered}"
        seen_at = self.seen.get(obj)
        if seen_at and seen_at != room:
            return f"go to {seen_at}"
        excluded = facts.exclusions.get(obj, set())
        for r in self.rooms:
            if r not in self.visited and r not in excluded:
                return f"go to {r}"
        for r in self.rooms:
            if r not in self.visited:
                return f"go to {r}"
        return "look around"


# -- rule writer -----------------------------------------------------------------

def slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", text.lower()).strip("_")


PROCEDURES = {
    "find": EntryDraft(PROCEDURAL, "find_and_focus", "How to find an object and focus on it",
                       steps=("go to the room where the object is kept", "focus on the object"),
                       proc_type="workflow"),
    "avoid": EntryDraft(PROCEDURAL, "focus_without_decoys",
                        "How to focus on an object that has look-alike decoys",
                        steps=("go to the room where the object is kept", "skip look-alike decoys",
                               "focus on the plain object"),
                        proc_type="guide"),
    "fetch": EntryDraft(PROCEDURAL, "move_object_to_container", "How to move an object into a container",
                        steps=("go to the room with the object", "pick up the object",
                               "go to the room with the container", "put the object in the container"),
                        proc_type="workflow"),
}


def location_draft(obj: str, room: str) -> EntryDraft:
    return EntryDraft(SEMANTIC, f"{slug(obj)}_location", f"Where the {obj} is kept",
                      details=f"The {obj} is in the {room}.")


def exclusion_draft(obj: str, rooms: Sequence[str]) -> EntryDraft:
    return EntryDraft(SEMANTIC, f"{slug(obj)}_not_found", f"Rooms searched without finding the {obj}",
                      details=f"The {obj} is not in the {join_rooms(rooms)}.")


def avoid_draft(decoy: str, obj: str) -> EntryDraft:
    return EntryDraft(SEMANTIC, f"avoid_{slug(decoy)}", f"Decoy that looks like the {obj}",
                      details=f"Never focus on the {decoy}; focusing it ends the episode. "
                              f"Focus on the plain {obj} instead.")


@dataclass
class ParsedTrace:
    instruction: str
    success: bool
    score: float
    actions: list
    rooms_seen: list   # (room, visible) per observation, in order


_TRACE_TASK = re.compile(r"^TASK: (.+)$", re.M)
_TRACE_OUTCOME = re.compile(r"^OUTCOME: (SUCCESS|FAIL) \(final score (-?[\d.]+)\)$", re.M)
_TRACE_ACTION = re.compile(r"^ACTION: (.+)$", re.M)


def parse_trace(text: str) -> Optional[ParsedTrace]:
    if "EPISODE TRACE" in text:
        text = text[text.index("EPISODE TRACE"):]
    task, outcome = _TRACE_TASK.search(text), _TRACE_OUTCOME.search(text)
    if not task or not outcome:
        return None
    rooms = []
    for m in _ROOM_RE.finditer(text):
        listing = m.group(2)
        rooms.append((m.group(1), [] if listing == "nothing" else listing.split(", ")))
    return ParsedTrace(task.group(1), outcome.group(1) == "SUCCESS", float(outcome.group(2)),
                       _TRACE_ACTION.findall(text), rooms)


class ToyRuleWriter:
    """Writer policy for the toy world: prompt in, INSERT_* blocks out.

    Success: location of every goal object, the family procedure, and the
    decoy warning when a decoy was seen. Wrong focus: a decoy warning plus
    the target's location. Step cap: locations of goal objects that were
    seen, and the searched rooms for those that were not.
    """

    def __init__(self, decoys: Optional[dict] = None):
        self.decoys = dict(decoys or {})
        self.calls = 0

    def drafts(self, prompt: str) -> list[EntryDraft]:
        trace = parse_trace(prompt)
        if trace is None:
            return []
        try:
            family, target, container = parse_instruction(trace.instruction)
        except ValueError:
            return []
        goals = [target] + ([container] if container else [])
        where: dict[str, str] = {}
        visited: list[str] = []
        decoy_seen = None
        for room, visible in trace.rooms_seen:
            if room not in visited:
                visited.append(room)
            for obj in visible:
                if obj in goals:
                    where.setdefault(obj, room)
                if obj == self.decoys.get(target):
                    decoy_seen = obj
        last = trace.actions[-1] if trace.actions else ""
        out: list[EntryDraft] = []
        if trace.success:
            out += [location_draft(g, where[g]) for g in goals if g in where]
            out.append(PROCEDURES[family])
            if decoy_seen:
                out.append(avoid_draft(decoy_seen, target))
        elif trace.score < 0 and last.startswith("focus on "):
            wrong = last[len("focus on "):]
            out.append(avoid_draft(wrong, target))
            if target in where:
                out.append(location_draft(target, where[target]))
        else:
            for g in goals:
                if g in where:
                    out.append(location_draft(g, where[g]))
                elif visited:
                    out.append(exclusion_draft(g, visited))
        return out

    def __call__(self, prompt: str) -> str:
        self.calls += 1
        drafts = self.drafts(prompt)
        if not drafts:
            return "NO_UPDATE"
        return "\n\n".join(render_insert_block(d) for d in drafts)
