"""Fast per-session writer: prompt construction, INSERT_* block parsing and
append-only insertion of the parsed entries."""
from __future__ import annotations

import ast
import json
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Callable, Optional

from .memory import (PROCEDURAL, PROC_TYPES, SEMANTIC, EntryDraft, MalformedEntry,
                     MemoryBank, MemoryEntry, TrajectoryRecord, insert_entries)

log = logging.getLogger(__name__)

WriterPolicy = Callable[[str], str]

ENV_PROFILES = ("alfworld", "scienceworld", "webarena", "toy")
NO_UPDATE = "NO_UPDATE"
BLOCK_STARTS = {"INSERT_SEMANTIC": SEMANTIC, "INSERT_PROCEDURAL": PROCEDURAL}
FIELD_KEYS = ("id", "name", "type", "summary", "details", "steps", "source_ids")
_FIELD_RE = re.compile(r"^(%s):(.*)$" % "|".join(FIELD_KEYS))


class UnknownEnvProfile(KeyError):
    pass


# -- prompts -------------------------------------------------------------------

@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    return resources.files("regionmem").joinpath("data", "prompts", f"{name}.txt").read_text("utf-8")


def serialize_trajectory(traj: TrajectoryRecord, obs_char_cap: Optional[int] = None) -> str:
    """Plain-text trace. Observation continuation lines are indented."""
    outcome = "SUCCESS" if traj.success else "FAIL"
    lines = [
        f"TASK: {traj.instruction}",
        f"TASK_ID: {traj.task_id} (family: {traj.task_family})",
        f"OUTCOME: {outcome} (final score {traj.final_score:g})",
    ]
    for i, (action, obs) in enumerate(traj.steps, 1):
        if obs_char_cap is not None and len(obs) > obs_char_cap:
            obs = obs[:obs_char_cap] + " [...]"
        lines.append(f"STEP {i}")
        lines.append(f"ACTION: {action}")
        obs_lines = obs.split("\n")
        lines.append(f"OBSERVATION: {obs_lines[0]}")
        lines.extend("  " + o for o in obs_lines[1:])
    return "\n".join(lines)


def build_writer_prompt(trajectory: TrajectoryRecord, env_profile: str,
                        success: Optional[bool] = None) -> str:
    if env_profile not in ENV_PROFILES:
        raise UnknownEnvProfile(env_profile)
    if success is None:
        success = trajectory.success
    variant = "success" if success else "failure"
    tail = load_prompt(f"{env_profile}_{variant}").format(output_format=load_prompt("output_format"))
    marker = "SUCCESS" if success else "FAIL"
    return (f"{load_prompt(env_profile + '_header')}\n{tail}\n"
            f"EPISODE TRACE ({marker})\n{serialize_trajectory(trajectory)}\n")


# -- parsing -------------------------------------------------------------------

@dataclass
class WriterOutput:
    entries: list[EntryDraft] = field(default_factory=list)
    no_update: bool = False
    diagnostics: list[str] = field(default_factory=list)


@dataclass
class ParsedBlock:
    draft: EntryDraft
    fields: dict


def _parse_steps(raw: str) -> Optional[list[str]]:
    raw = raw.strip()
    if not raw:
        return None
    if raw.startswith("["):
        for loader in (json.loads, ast.literal_eval):
            try:
                value = loader(raw)
            except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
                continue
            if isinstance(value, list) and all(isinstance(s, str) for s in value):
                return value
        return None
    steps = []
    for line in raw.split("\n"):
        line = line.strip()
        if not line:
            continue
        if line[0] in "\"'":
            try:
                value = json.loads(line) if line[0] == '"' else ast.literal_eval(line)
            except (ValueError, SyntaxError):
                return None
            if not isinstance(value, str):
                return None
            steps.append(value)
        else:
            steps.append(re.sub(r"^(?:[-*]|\d+[.)])\s*", "", line))
    return steps or None


def _finish(kind: str, fields: dict, diagnostics: list, where: str) -> Optional[ParsedBlock]:
    def get(key):
        v = fields.get(key)
        return v.strip() if v is not None else None

    name, summary = get("name"), get("summary")
    try:
        if not name or not summary:
            raise MalformedEntry("missing name or summary")
        if kind == SEMANTIC:
            details = get("details")
            if not details:
                raise MalformedEntry("semantic block without details")
            draft = EntryDraft(SEMANTIC, name, summary, details=details)
        else:
            proc_type = (get("type") or "").lower()
            if proc_type not in PROC_TYPES:
                raise MalformedEntry(f"procedural block with type {proc_type!r}")
            steps = _parse_steps(fields.get("steps") or "")
            if not steps:
                raise MalformedEntry("procedural block without parseable steps")
            draft = EntryDraft(PROCEDURAL, name, summary, steps=tuple(steps), proc_type=proc_type)
    except MalformedEntry as exc:
        diagnostics.append(f"{where}: dropped {kind} block ({exc})")
        return None
    return ParsedBlock(draft, {k: (v.strip() if isinstance(v, str) else v) for k, v in fields.items()})


def parse_blocks(text: str) -> tuple[list[ParsedBlock], list[str], bool]:
    """Total, line-oriented parse of INSERT_* blocks.

    Returns (blocks, diagnostics, saw_no_update). Malformed blocks are dropped
    with a diagnostic; an unterminated block is closed at the next block
    start or at end of input.
    """
    blocks: list[ParsedBlock] = []
    diagnostics: list[str] = []
    saw_no_update = False
    kind: Optional[str] = None
    fields: dict = {}
    current: Optional[str] = None
    start_line = 0

    def close(reason: Optional[str] = None):
        nonlocal kind, fields, current
        if kind is not None:
            if reason:
                diagnostics.append(f"line {start_line}: {reason}")
            block = _finish(kind, fields, diagnostics, f"line {start_line}")
            if block is not None:
                blocks.append(block)
        kind, fields, current = None, {}, None

    for lineno, line in enumerate(text.replace("\r\n", "\n").split("\n"), 1):
        stripped = line.strip()
        if stripped in BLOCK_STARTS:
            close("block not terminated by END")
            kind, start_line = BLOCK_STARTS[stripped], lineno
            continue
        if kind is None:
            if stripped == NO_UPDATE:
                saw_no_update = True
            continue
        if stripped == "END":
            close()
            continue
        m = _FIELD_RE.match(line)
        if m:
            current = m.group(1)
            fields[current] = m.group(2).strip()
        elif current is not None:
            fields[current] += "\n" + line.rstrip()
        elif stripped:
            diagnostics.append(f"line {lineno}: stray text inside block")
    close("block not terminated by END")
    return blocks, diagnostics, saw_no_update


def parse_writer_output(text: str) -> WriterOutput:
    blocks, diagnostics, saw_no_update = parse_blocks(text)
    drafts = [b.draft for b in blocks]
    return WriterOutput(entries=drafts, no_update=saw_no_update and not drafts,
                        diagnostics=diagnostics)


# -- session writing -------------------------------------------------------------

def session_entries(bank: MemoryBank, trajectory: TrajectoryRecord,
                    writer_policy: WriterPolicy, env_profile: str) -> tuple[list[MemoryEntry], WriterOutput]:
    """Run the writer on one trajectory and materialize (not insert) entries."""
    if trajectory.id not in bank.trajectory_log:
        raise KeyError(f"trajectory {trajectory.id} is not in the bank's log")
    prompt = build_writer_prompt(trajectory, env_profile, trajectory.success)
    completion = writer_policy(prompt)
    output = parse_writer_output(completion or "")
    for d in output.diagnostics:
        log.debug("writer parse (%s): %s", trajectory.id, d)
    entries = [bank.materialize(d, trajectory.session_index, source_trajectory_ids=[trajectory.id])
               for d in output.entries]
    return entries, output


def write_session(bank: MemoryBank, trajectory: TrajectoryRecord,
                  writer_policy: WriterPolicy, env_profile: str) -> MemoryBank:
    entries, _ = session_entries(bank, trajectory, writer_policy, env_profile)
    return insert_entries(bank, entries)


class ScriptedWriter:
    """Table-driven writer policy: returns canned completions in order,
    repeating the last one when the table runs out."""

    def __init__(self, completions):
        if isinstance(completions, str):
            completions = [completions]
        self.completions = list(completions)
        self.prompts: list[str] = []

    def __call__(self, prompt: str) -> str:
        self.prompts.append(prompt)
        i = min(len(self.prompts) - 1, len(self.completions) - 1)
        return self.completions[i] if self.completions else NO_UPDATE
