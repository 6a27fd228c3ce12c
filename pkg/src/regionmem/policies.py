"""Scripted consolidator policies.

Each policy is a callable ``(system_prompt, messages) -> call text`` and
derives its next move from the message history alone, so a policy object can
be reused across sessions.
"""
from __future__ import annotations

import hashlib
import math
import random
import re
from collections import OrderedDict
from typing import Optional

from .consolidation import MAX_CHECK_IDS, format_tool_call
from .env.scripted import (AVOID_RE, EXCLUSION_RE, LOCATION_RE, exclusion_draft, location_draft,
                           split_rooms)
from .memory import SEMANTIC, EntryDraft
from .writer import parse_blocks

_OVERVIEW_ROW = re.compile(r"^(\S+) \| (semantic|procedural) \| ", re.M)
_BUDGET_RE = re.compile(r"Turn budget: (\d+)")


def region_ids(messages: list) -> list[str]:
    return [m.group(1) for m in _OVERVIEW_ROW.finditer(messages[0]["content"])]


def turn_budget(messages: list) -> Optional[int]:
    m = _BUDGET_RE.search(messages[0]["content"])
    return int(m.group(1)) if m else None


def assistant_calls(messages: list) -> list[str]:
    return [m["content"] for m in messages if m["role"] == "assistant"]


def checked_blocks(messages: list) -> "OrderedDict[str, object]":
    """id -> ParsedBlock for every entry returned by check_memory so far."""
    out: OrderedDict = OrderedDict()
    for i, m in enumerate(messages):
        if m["role"] != "assistant" or not m["content"].startswith("check_memory"):
            continue
        if i + 1 >= len(messages):
            continue
        blocks, _, _ = parse_blocks(messages[i + 1]["content"])
        for b in blocks:
            if "id" in b.fields:
                out[b.fields["id"]] = b
    return out


class _ScriptedBase:
    """Survey the region with batched check_memory calls, then emit a fixed
    plan of synthesize calls, then terminate."""

    def plan(self, blocks: "OrderedDict[str, object]", ids: list[str]) -> list[str]:
        raise NotImplementedError

    def __call__(self, system_prompt: str, messages: list) -> str:
        ids = region_ids(messages)
        calls = assistant_calls(messages)
        n_checks = math.ceil(len(ids) / MAX_CHECK_IDS)
        done_checks = sum(c.startswith("check_memory") for c in calls)
        if done_checks < n_checks:
            batch = ids[done_checks * MAX_CHECK_IDS:(done_checks + 1) * MAX_CHECK_IDS]
            return format_tool_call("check_memory", ids=batch)
        plan = self.plan(checked_blocks(messages), ids)
        budget = turn_budget(messages)
        if budget is not None:
            # keep room for terminate
            plan = plan[: max(0, budget - n_checks - 1)]
        done_synth = sum(c.startswith("synthesize") for c in calls)
        if done_synth < len(plan):
            return plan[done_synth]
        return "terminate()"


def _synth_call(draft: EntryDraft, source_ids) -> str:
    kwargs = {"source_ids": list(source_ids), "type": draft.kind, "name": draft.name,
              "summary": draft.summary}
    if draft.kind == SEMANTIC:
        kwargs["details"] = draft.details
    else:
        kwargs["steps"] = list(draft.steps)
        kwargs["proc_type"] = draft.proc_type
    return format_tool_call("synthesize", **kwargs)


class TerminatePolicy:
    def __call__(self, system_prompt: str, messages: list) -> str:
        return "terminate()"


class ErrorPolicy:
    def __call__(self, system_prompt: str, messages: list) -> str:
        raise RuntimeError("consolidator endpoint unavailable")


class CopyAllPolicy(_ScriptedBase):
    """Re-synthesizes every region entry one-to-one (no compression)."""

    def plan(self, blocks, ids):
        return [_synth_call(b.draft, [eid]) for eid, b in blocks.items()]


class DedupAbstractPolicy(_ScriptedBase):
    """Merges the region into one entry per distinct piece of knowledge.

    * location facts are grouped per object; disagreements are resolved by
      majority (earliest entry breaks ties) and the group also absorbs the
      object's "not in" facts;
    * "not in" facts for objects with no known location are unioned;
    * decoy warnings and everything else are deduplicated by exact content.

    With ``drop_prob > 0`` each group is omitted with that probability
    (seeded per region), which makes rollouts differ within a group.
    """

    def __init__(self, drop_prob: float = 0.0, seed: int = 0):
        self.drop_prob = drop_prob
        self.seed = seed

    def groups(self, blocks) -> list[tuple[EntryDraft, list[str]]]:
        locations: OrderedDict = OrderedDict()    # obj -> [(room, id)]
        exclusions: OrderedDict = OrderedDict()   # obj -> ([rooms], [ids])
        exact: OrderedDict = OrderedDict()        # content key -> (draft, [ids])
        order: list = []                          # group keys in first-seen order
        for eid, block in blocks.items():
            d = block.draft
            text = d.details if d.kind == SEMANTIC else ""
            if d.kind == SEMANTIC and not AVOID_RE.search(text):
                locs = LOCATION_RE.findall(text)
                excl = EXCLUSION_RE.findall(text)
                if locs:
                    for obj, room in locs:
                        if obj not in locations:
                            locations[obj] = []
                            order.append(("loc", obj))
                        locations[obj].append((room, eid))
                    continue
                if excl:
                    for obj, rooms in excl:
                        if obj not in exclusions:
                            exclusions[obj] = ([], [])
                            order.append(("excl", obj))
                        known, cited = exclusions[obj]
                        for r in split_rooms(rooms):
                            if r not in known:
                                known.append(r)
                        cited.append(eid)
                    continue
            key = (d.kind, d.name, d.summary, d.details, d.steps, d.proc_type)
            if key not in exact:
                exact[key] = (d, [])
                order.append(("exact", key))
            exact[key][1].append(eid)

        out = []
        for tag, key in order:
            if tag == "loc":
                votes = locations[key]
                counts: dict = {}
                for room, _ in votes:
                    counts[room] = counts.get(room, 0) + 1
                best = max(counts.values())
                room = next(r for r, _ in votes if counts[r] == best)
                cited = [eid for _, eid in votes] + (exclusions.get(key, ([], []))[1])
                out.append((location_draft(key, room), cited))
            elif tag == "excl":
                if key in locations:
                    continue
                rooms, cited = exclusions[key]
                out.append((exclusion_draft(key, rooms), cited))
            else:
                draft, cited = exact[key]
                out.append((draft, cited))
        return out

    def plan(self, blocks, ids):
        groups = self.groups(blocks)
        if self.drop_prob > 0:
            digest = hashlib.sha256(("|".join(ids) + f"#{self.seed}").encode()).digest()
            rng = random.Random(int.from_bytes(digest[:8], "little"))
            kept = [g for g in groups if rng.random() >= self.drop_prob]
            groups = kept or groups[:1]
        return [_synth_call(d, cited) for d, cited in groups]


class RandomToolPolicy:
    """Seeded random caller for protocol tests: mixes valid calls, calls
    with bad ids, oversized check_memory requests and garbage text. Never
    terminates unless ``terminate_prob`` fires."""

    def __init__(self, seed: int = 0, terminate_prob: float = 0.0):
        self.rng = random.Random(seed)
        self.terminate_prob = terminate_prob

    def __call__(self, system_prompt: str, messages: list) -> str:
        ids = region_ids(messages) or ["missing-id"]
        r = self.rng.random()
        if r < self.terminate_prob:
            return "terminate()"
        choice = self.rng.randrange(7)
        if choice == 0:
            return format_tool_call("search_memory", query=self.rng.choice(["box", "room", "focus"]),
                                    k=self.rng.randint(1, 6))
        if choice == 1:
            n = self.rng.choice([1, 2, 31, 40])
            return format_tool_call("check_memory", ids=[self.rng.choice(ids) for _ in range(n)])
        if choice == 2:
            return format_tool_call("get_source_trace", id=self.rng.choice(ids + ["nope"]))
        if choice == 3:
            src = self.rng.sample(ids, k=min(len(ids), self.rng.randint(0, 2)))
            return format_tool_call("synthesize", source_ids=src, type="semantic", name="n",
                                    summary="s", details="d")
        if choice == 4:
            return format_tool_call("synthesize", source_ids=[ids[0]], type="procedural", name="p",
                                    summary="s", steps=[])
        if choice == 5:
            return "I think I should look around first."
        return "synthesize(source_ids=[" + self.rng.choice(ids)
