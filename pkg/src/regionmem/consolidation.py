"""Offline consolidator: working-region selection, the bounded one-tool-per-turn
session over the region, and the final region rewrite.

The region is read-only evidence during the session. Only the synthesized
drafts survive, and they replace the whole region at the end. If the policy
fails or produces nothing usable the bank is left alone.
"""
from __future__ import annotations

import ast
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from .memory import (PROCEDURAL, PROC_TYPES, SEMANTIC, EntryDraft, MalformedEntry, MemoryBank,
                     MemoryEntry, UngroundedSynthesis, apply_region_rewrite,
                     provenance_trajectories)
from .retrieval import Embedder, score_entries
from .writer import load_prompt, serialize_trajectory

log = logging.getLogger(__name__)

DEFAULT_TURN_BUDGET = 40
MAX_CHECK_IDS = 30
DEFAULT_SEARCH_K = 5

POLICY_TERMINATE = "policy_terminate"
BUDGET_EXHAUSTED = "budget_exhausted"
POLICY_ERROR = "policy_error"

ConsolidatorPolicy = Callable[[str, list], str]


class ToolError(Exception):
    """A rejected tool call; the turn is consumed and the error is returned
    to the policy as the tool result."""


class SessionTerminated(ToolError):
    pass


class TooManyIds(ToolError):
    pass


class IdOutsideRegion(ToolError):
    pass


class MalformedDraft(ToolError):
    pass


class CallParseError(ToolError):
    pass


class UngroundedDraft(ToolError, UngroundedSynthesis):
    pass


# -- regions -----------------------------------------------------------------------

@dataclass
class IntervalLog:
    """Entry ids written and retrieved during the sessions since the last
    consolidation event."""

    written_ids: list = field(default_factory=list)
    retrieved_ids: list = field(default_factory=list)
    sessions: list = field(default_factory=list)

    def record(self, session_index: int, written: Iterable[str], retrieved: Iterable[str]) -> None:
        self.sessions.append(session_index)
        self.written_ids.extend(written)
        self.retrieved_ids.extend(retrieved)

    def to_dict(self) -> dict:
        return {"written_ids": list(self.written_ids), "retrieved_ids": list(self.retrieved_ids),
                "sessions": list(self.sessions)}

    @classmethod
    def from_dict(cls, d: dict) -> "IntervalLog":
        return cls(list(d.get("written_ids", [])), list(d.get("retrieved_ids", [])),
                   list(d.get("sessions", [])))


class WorkingRegion:
    def __init__(self, bank: MemoryBank, entry_ids: Iterable[str]):
        self.bank = bank
        self.entry_ids = frozenset(entry_ids)

    @property
    def provenance_trajectory_ids(self) -> set[str]:
        out = set()
        for eid in self.entry_ids:
            out.update(self.bank[eid].source_trajectory_ids)
        return out

    def sorted_ids(self) -> list[str]:
        return sorted(self.entry_ids)

    def entries(self) -> list[MemoryEntry]:
        return [self.bank[i] for i in self.sorted_ids()]

    def __len__(self) -> int:
        return len(self.entry_ids)

    def __contains__(self, entry_id) -> bool:
        return entry_id in self.entry_ids


def select_working_region(bank: MemoryBank, interval_log: IntervalLog) -> WorkingRegion:
    """(written | retrieved) restricted to currently active entries."""
    wanted = set(interval_log.written_ids) | set(interval_log.retrieved_ids)
    return WorkingRegion(bank, wanted & bank.active_ids())


# -- call grammar ---------------------------------------------------------------------

TOOL_PARAMS = {
    "search_memory": ("query", "k"),
    "check_memory": ("ids",),
    "get_source_trace": ("id",),
    "synthesize": ("source_ids", "type", "name", "summary", "details", "steps", "proc_type"),
    "terminate": (),
}


def parse_tool_call(text: str) -> tuple[str, dict]:
    """Parse ``tool_name(arg=value, ...)`` with Python/JSON-style literals.

    Leading prose and code fences are tolerated; the first line starting with
    a known tool name begins the call.
    """
    lines = (text or "").replace("\r\n", "\n").split("\n")
    start = None
    for i, line in enumerate(lines):
        if line.strip().split("(", 1)[0].strip() in TOOL_PARAMS and "(" in line:
            start = i
            break
    if start is None:
        raise CallParseError("no tool call found")
    body = "\n".join(lines[start:]).strip()
    candidates = [body]
    if "```" in body:
        candidates.append(body.split("```", 1)[0].strip())
    if ")" in body:
        candidates.append(body[: body.rindex(")") + 1])
    node = None
    for cand in candidates:
        try:
            node = ast.parse(cand, mode="eval").body
            break
        except (SyntaxError, ValueError, RecursionError):
            continue
    if not isinstance(node, ast.Call) or not isinstance(node.func, ast.Name):
        raise CallParseError(f"not a call expression: {body[:80]!r}")
    name = node.func.id
    if name not in TOOL_PARAMS:
        raise CallParseError(f"unknown tool {name!r}")
    params = TOOL_PARAMS[name]
    if len(node.args) > len(params):
        raise CallParseError(f"{name} takes at most {len(params)} positional arguments")
    kwargs = {}
    try:
        for pname, arg in zip(params, node.args):
            kwargs[pname] = _literal(arg)
        for kw in node.keywords:
            if kw.arg is None or kw.arg not in params:
                raise CallParseError(f"{name} has no argument {kw.arg!r}")
            kwargs[kw.arg] = _literal(kw.value)
    except (ValueError, TypeError, SyntaxError, RecursionError) as exc:
        raise CallParseError(f"non-literal argument: {exc}") from exc
    return name, kwargs


_JSON_NAMES = {"null": None, "true": True, "false": False}


def _literal(node):
    """literal_eval that also accepts JSON's null/true/false."""
    if isinstance(node, ast.Name) and node.id in _JSON_NAMES:
        return _JSON_NAMES[node.id]
    if isinstance(node, (ast.List, ast.Tuple)):
        return [_literal(n) for n in node.elts]
    if isinstance(node, ast.Dict):
        return {_literal(k): _literal(v) for k, v in zip(node.keys, node.values)}
    return ast.literal_eval(node)


def format_tool_call(tool: str, **kwargs) -> str:
    args = ", ".join(f"{k}={json.dumps(v, ensure_ascii=False)}" for k, v in kwargs.items())
    return f"{tool}({args})"


# -- session -----------------------------------------------------------------------------

@dataclass
class Turn:
    call: str
    result: str
    ok: bool
    tool: Optional[str] = None

    def to_dict(self) -> dict:
        return {"call": self.call, "result": self.result, "ok": self.ok, "tool": self.tool}


@dataclass
class SynthDraft:
    draft: EntryDraft
    source_ids: tuple[str, ...]

    def to_dict(self) -> dict:
        d = {"source_ids": list(self.source_ids), "kind": self.draft.kind, "name": self.draft.name,
             "summary": self.draft.summary}
        if self.draft.kind == SEMANTIC:
            d["details"] = self.draft.details
        else:
            d["proc_type"] = self.draft.proc_type
            d["steps"] = list(self.draft.steps)
        return d


def render_check_block(entry: MemoryEntry) -> str:
    lines = ["INSERT_SEMANTIC" if entry.kind == SEMANTIC else "INSERT_PROCEDURAL", f"id: {entry.id}",
             f"name: {entry.name}"]
    if entry.kind == PROCEDURAL:
        lines.append(f"type: {entry.proc_type}")
    lines.append(f"summary: {entry.summary}")
    if entry.kind == SEMANTIC:
        lines.append(f"details: {entry.details}")
    else:
        lines.append("steps: " + json.dumps(list(entry.steps), ensure_ascii=False))
    if entry.source_entry_ids:
        lines.append("source_ids: " + json.dumps(list(entry.source_entry_ids)))
    lines.append("END")
    return "\n".join(lines)


class ConsolidationSession:
    """Tool-use state over one working region."""

    def __init__(self, bank: MemoryBank, region: WorkingRegion, turn_budget: int = DEFAULT_TURN_BUDGET,
                 embedder: Optional[Embedder] = None, obs_char_cap: int = 500):
        if not region.entry_ids <= bank.active_ids():
            raise ValueError("region must be a subset of the active entries")
        self.bank = bank
        self.region = region
        self.turn_budget = turn_budget
        self.embedder = embedder
        self.obs_char_cap = obs_char_cap
        self.transcript: list[Turn] = []
        self.output_drafts: list[SynthDraft] = []
        self.terminated = False
        self.termination_reason: Optional[str] = None
        self.error: Optional[str] = None
        self.applied = False
        self.replacement_ids: list[str] = []

    # tools
    def _live(self) -> None:
        if self.terminated:
            raise SessionTerminated("session already terminated")

    def _in_region(self, entry_id) -> str:
        if not isinstance(entry_id, str) or entry_id not in self.region:
            raise IdOutsideRegion(f"id {entry_id!r} is not in the reference bank")
        return entry_id

    def search_memory(self, query: str, k: int = DEFAULT_SEARCH_K) -> list[tuple[str, float]]:
        self._live()
        if not isinstance(k, int) or k < 1:
            raise ToolError("k must be a positive integer")
        return score_entries(str(query), self.region.entries(), self.embedder)[:k]

    def check_memory(self, ids: Sequence[str]) -> list[MemoryEntry]:
        self._live()
        if isinstance(ids, str):
            ids = [ids]
        ids = list(ids)
        if len(ids) > MAX_CHECK_IDS:
            raise TooManyIds(f"check_memory accepts up to {MAX_CHECK_IDS} ids, got {len(ids)}")
        return [self.bank[self._in_region(i)] for i in ids]

    def get_source_trace(self, entry_id: str) -> str:
        self._live()
        self._in_region(entry_id)
        parts = []
        for tid in provenance_trajectories(self.bank, entry_id):
            traj = self.bank.trajectory_log.get(tid)
            if traj is None:
                parts.append(f"TRAJECTORY {tid}\n(unavailable)")
            else:
                parts.append(f"TRAJECTORY {tid}\n" + serialize_trajectory(traj, self.obs_char_cap))
        return "\n---\n".join(parts)

    def synthesize(self, source_ids, type, name, summary, details=None, steps=None,
                   proc_type=None) -> str:
        self._live()
        if isinstance(source_ids, str):
            source_ids = [source_ids]
        source_ids = list(dict.fromkeys(source_ids or []))
        if not source_ids:
            raise UngroundedDraft("synthesize must cite at least one source id")
        outside = [s for s in source_ids if s not in self.region]
        if outside:
            raise UngroundedDraft(f"source ids outside the reference bank: {outside}")
        kind = str(type).lower()
        if kind in PROC_TYPES:
            proc_type, kind = kind, PROCEDURAL
        try:
            if kind == SEMANTIC:
                draft = EntryDraft(SEMANTIC, _text(name), _text(summary), details=_text(details))
            elif kind == PROCEDURAL:
                if isinstance(steps, str):
                    steps = [steps]
                draft = EntryDraft(PROCEDURAL, _text(name), _text(summary),
                                   steps=tuple(_text(s) for s in (steps or [])),
                                   proc_type=(proc_type or "workflow").lower())
            else:
                raise MalformedEntry(f"type must be semantic or procedural, got {type!r}")
            if not draft.name or not draft.summary or (kind == SEMANTIC and not draft.details):
                raise MalformedEntry("name, summary and details/steps must be non-empty")
        except MalformedEntry as exc:
            raise MalformedDraft(str(exc)) from exc
        self.output_drafts.append(SynthDraft(draft, tuple(source_ids)))
        return f"d{len(self.output_drafts)}"

    def terminate(self) -> None:
        self._live()
        self.terminated = True
        self.termination_reason = POLICY_TERMINATE

    # dispatch
    def dispatch(self, call_text: str) -> Turn:
        """Execute one policy turn. Rejected or malformed calls still
        consume the turn."""
        if self.terminated:
            raise SessionTerminated("session already terminated")
        if len(self.transcript) >= self.turn_budget:
            raise ToolError("turn budget exhausted")
        tool = None
        try:
            tool, kwargs = parse_tool_call(call_text)
            result = self._run(tool, kwargs)
            turn = Turn(call_text, result, True, tool)
        except ToolError as exc:
            turn = Turn(call_text, f"ERROR ({type(exc).__name__}): {exc}", False, tool)
        except TypeError as exc:
            turn = Turn(call_text, f"ERROR (BadArguments): {exc}", False, tool)
        self.transcript.append(turn)
        return turn

    def _run(self, tool: str, kwargs: dict) -> str:
        if tool == "search_memory":
            hits = self.search_memory(**kwargs)
            if not hits:
                return "no matching entries"
            return "\n".join(f"{i} (score {s:.4f}): {self.bank[i].name} -- {self.bank[i].summary}"
                             for i, s in hits)
        if tool == "check_memory":
            return "\n\n".join(render_check_block(e) for e in self.check_memory(**kwargs))
        if tool == "get_source_trace":
            return self.get_source_trace(kwargs.get("id"))
        if tool == "synthesize":
            draft_id = self.synthesize(**kwargs)
            return f"OK: recorded draft {draft_id} citing {len(self.output_drafts[-1].source_ids)} entries"
        self.terminate(**kwargs)
        return "OK: terminated"

    def overview(self) -> str:
        lines = [f"Reference bank: {len(self.region)} entries. Turn budget: {self.turn_budget}.",
                 "id | type | name | summary"]
        for e in self.region.entries():
            lines.append(f"{e.id} | {e.kind} | {e.name} | {e.summary}")
        return "\n".join(lines)

    def messages(self) -> list[dict]:
        msgs = [{"role": "user", "content": self.overview()}]
        for turn in self.transcript:
            msgs.append({"role": "assistant", "content": turn.call})
            msgs.append({"role": "user", "content": turn.result})
        return msgs

    def to_log(self, session_index: int, applied: bool) -> dict:
        return {
            "session_index": session_index,
            "region_ids": self.region.sorted_ids(),
            "transcript": [t.to_dict() for t in self.transcript],
            "drafts": [d.to_dict() for d in self.output_drafts],
            "applied": applied,
            "termination_reason": self.termination_reason,
        }


def _text(value) -> str:
    if value is None:
        return ""
    return str(value).strip()


# module-level names for the tool operations
def tool_search_memory(session: ConsolidationSession, query: str, k: int = DEFAULT_SEARCH_K):
    return session.search_memory(query, k)


def tool_check_memory(session: ConsolidationSession, ids):
    return session.check_memory(ids)


def tool_get_source_trace(session: ConsolidationSession, entry_id: str) -> str:
    return session.get_source_trace(entry_id)


def tool_synthesize(session: ConsolidationSession, source_ids, kind, name, summary,
                    details=None, steps=None, proc_type=None) -> str:
    return session.synthesize(source_ids, kind, name, summary, details, steps, proc_type)


def system_prompt() -> str:
    return load_prompt("consolidator_system")


def drive_session(session: ConsolidationSession, policy: ConsolidatorPolicy) -> ConsolidationSession:
    prompt = system_prompt()
    while not session.terminated and len(session.transcript) < session.turn_budget:
        try:
            call = policy(prompt, session.messages())
        except Exception as exc:
            log.warning("consolidator policy failed: %s", exc)
            session.error = f"{type(exc).__name__}: {exc}"
            session.terminated = True
            session.termination_reason = POLICY_ERROR
            return session
        session.dispatch(call)
    if not session.terminated:
        session.terminated = True
        session.termination_reason = BUDGET_EXHAUSTED
    return session


def materialize_drafts(bank: MemoryBank, session: ConsolidationSession,
                       session_index: int) -> list[MemoryEntry]:
    out = []
    for sd in session.output_drafts:
        trajectories: list[str] = []
        for sid in sd.source_ids:
            for tid in provenance_trajectories(bank, sid):
                if tid not in trajectories:
                    trajectories.append(tid)
        out.append(bank.materialize(sd.draft, session_index, trajectories, sd.source_ids))
    return out


def run_consolidation(bank: MemoryBank, region: WorkingRegion, policy: ConsolidatorPolicy,
                      turn_budget: int = DEFAULT_TURN_BUDGET, session_index: Optional[int] = None,
                      embedder: Optional[Embedder] = None,
                      obs_char_cap: int = 500) -> tuple[MemoryBank, ConsolidationSession]:
    """Drive ``policy`` over the region, then rewrite the region with the
    synthesized drafts. Fails open: policy errors or an empty output leave
    the bank unchanged."""
    session = ConsolidationSession(bank, region, turn_budget, embedder, obs_char_cap)
    drive_session(session, policy)
    if session.termination_reason == POLICY_ERROR or not session.output_drafts:
        return bank, session
    if session_index is None:
        session_index = max((e.created_session for e in bank.entries.values()), default=0)
    replacement = materialize_drafts(bank, session, session_index)
    apply_region_rewrite(bank, region.entry_ids, replacement)
    session.applied = True
    session.replacement_ids = [e.id for e in replacement]
    return bank, session
