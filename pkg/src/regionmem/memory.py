"""Memory bank data model: typed entries, trajectory log, provenance and the
region-rewrite write operator.

Entries are never deleted. A rewrite retires the region and inserts the
replacement set, so provenance chains stay resolvable after consolidation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional, Protocol

SEMANTIC = "semantic"
PROCEDURAL = "procedural"
KINDS = (SEMANTIC, PROCEDURAL)
PROC_TYPES = ("workflow", "guide")

ACTIVE = "active"
RETIRED = "retired"


class BankError(Exception):
    """Base class for bank errors."""


class DuplicateId(BankError):
    pass


class DanglingProvenance(BankError):
    def __init__(self, missing_id: str, what: str = "trajectory"):
        super().__init__(f"provenance refers to unknown {what} id {missing_id!r}")
        self.missing_id = missing_id


class UngroundedSynthesis(BankError):
    pass


class RegionContainsRetired(BankError):
    pass


class MalformedEntry(BankError, ValueError):
    pass


# -- token accounting -------------------------------------------------------

class Tokenizer(Protocol):
    def count(self, text: str) -> int: ...


class ByteTokenizer:
    """ceil(utf-8 bytes / 4)."""

    def count(self, text: str) -> int:
        return math.ceil(len(text.encode("utf-8")) / 4)


_tokenizer: Tokenizer = ByteTokenizer()


def set_tokenizer(tokenizer: Tokenizer) -> None:
    """Swap the process-wide tokenizer. Existing entries keep their counts."""
    global _tokenizer
    _tokenizer = tokenizer


def count_tokens(text: str) -> int:
    return _tokenizer.count(text)


# -- records -----------------------------------------------------------------

@dataclass(frozen=True)
class EntryDraft:
    """Entry content without identity or provenance, as produced by a writer
    or a consolidator before materialization."""

    kind: str
    name: str
    summary: str
    details: Optional[str] = None
    steps: Optional[tuple[str, ...]] = None
    proc_type: Optional[str] = None

    def __post_init__(self):
        if self.steps is not None and not isinstance(self.steps, tuple):
            object.__setattr__(self, "steps", tuple(self.steps))
        validate_shape(self.kind, self.details, self.steps, self.proc_type)


def validate_shape(kind, details, steps, proc_type) -> None:
    if kind == SEMANTIC:
        if steps is not None or proc_type is not None:
            raise MalformedEntry("semantic entries carry details, not steps/proc_type")
        if details is None:
            raise MalformedEntry("semantic entry without details")
    elif kind == PROCEDURAL:
        if details is not None:
            raise MalformedEntry("procedural entries carry steps, not details")
        if not steps:
            raise MalformedEntry("procedural entry needs at least one step")
        if proc_type not in PROC_TYPES:
            raise MalformedEntry(f"proc_type must be one of {PROC_TYPES}, got {proc_type!r}")
    else:
        raise MalformedEntry(f"unknown kind {kind!r}")


@dataclass(frozen=True)
class MemoryEntry:
    id: str
    kind: str
    name: str
    summary: str
    details: Optional[str] = None
    steps: Optional[tuple[str, ...]] = None
    proc_type: Optional[str] = None
    source_trajectory_ids: tuple[str, ...] = ()
    source_entry_ids: tuple[str, ...] = ()
    created_session: int = 0
    status: str = ACTIVE
    token_count: int = field(init=False, default=0)

    def __post_init__(self):
        for name in ("steps", "source_trajectory_ids", "source_entry_ids"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, tuple):
                object.__setattr__(self, name, tuple(value))
        validate_shape(self.kind, self.details, self.steps, self.proc_type)
        if self.status not in (ACTIVE, RETIRED):
            raise MalformedEntry(f"bad status {self.status!r}")
        object.__setattr__(self, "token_count", count_tokens(render_entry(self)))

    @property
    def synthesized(self) -> bool:
        return bool(self.source_entry_ids)

    @property
    def draft(self) -> EntryDraft:
        return EntryDraft(self.kind, self.name, self.summary, self.details, self.steps, self.proc_type)


@dataclass(frozen=True)
class TrajectoryRecord:
    id: str
    task_id: str
    task_family: str
    instruction: str
    steps: tuple[tuple[str, str], ...]
    success: bool
    final_score: float
    session_index: int

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple((str(a), str(o)) for a, o in self.steps))


def render_entry(entry) -> str:
    """Canonical text of an entry: name, summary, then details or numbered
    steps. Used for both embedding and token counting."""
    lines = [entry.name, entry.summary]
    if entry.kind == SEMANTIC:
        lines.append(entry.details)
    else:
        lines.extend(f"{i}. {step}" for i, step in enumerate(entry.steps, 1))
    return "\n".join(lines)


def format_entry_id(session_index: int, counter: int) -> str:
    # zero-padded so string order equals (session, counter) order
    return f"{session_index:05d}-{counter:06d}"


def parse_entry_id(entry_id: str) -> tuple[int, int]:
    session, counter = entry_id.split("-")
    return int(session), int(counter)


# -- the bank ----------------------------------------------------------------

class MemoryBank:
    """Entries plus the trajectory log they cite.

    Mutation is single-writer; take ``copy()`` for a snapshot. ``strict=False``
    builds a local evaluation bank whose entries may cite trajectories that
    are not present.
    """

    def __init__(self, strict: bool = True):
        self.entries: dict[str, MemoryEntry] = {}
        self.trajectory_log: dict[str, TrajectoryRecord] = {}
        self.strict = strict
        self._counter = 0

    @classmethod
    def local(cls, entries: Iterable[MemoryEntry]) -> "MemoryBank":
        bank = cls(strict=False)
        for e in entries:
            if e.id in bank.entries:
                raise DuplicateId(e.id)
            bank.entries[e.id] = replace(e, status=ACTIVE)
        bank._sync_counter()
        return bank

    def copy(self) -> "MemoryBank":
        other = MemoryBank(strict=self.strict)
        other.entries = dict(self.entries)
        other.trajectory_log = dict(self.trajectory_log)
        other._counter = self._counter
        return other

    # views
    def active(self) -> list[MemoryEntry]:
        return [e for e in self.entries.values() if e.status == ACTIVE]

    def active_ids(self) -> set[str]:
        return {e.id for e in self.entries.values() if e.status == ACTIVE}

    def retired(self) -> list[MemoryEntry]:
        return [e for e in self.entries.values() if e.status == RETIRED]

    def active_tokens(self) -> int:
        return sum(e.token_count for e in self.active())

    def retired_tokens(self) -> int:
        return sum(e.token_count for e in self.retired())

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self.entries

    def __getitem__(self, entry_id: str) -> MemoryEntry:
        return self.entries[entry_id]

    def __eq__(self, other) -> bool:
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return (self.entries == other.entries and self.trajectory_log == other.trajectory_log)

    # ids
    def next_id(self, session_index: int) -> str:
        entry_id = format_entry_id(session_index, self._counter)
        self._counter += 1
        return entry_id

    def _sync_counter(self) -> None:
        counters = [parse_entry_id(i)[1] for i in self.entries if _is_std_id(i)]
        self._counter = max(counters, default=-1) + 1

    # trajectories
    def log_trajectory(self, trajectory: TrajectoryRecord) -> None:
        if trajectory.id in self.trajectory_log:
            raise DuplicateId(trajectory.id)
        self.trajectory_log[trajectory.id] = trajectory

    def materialize(self, draft: EntryDraft, session_index: int,
                    source_trajectory_ids: Iterable[str] = (),
                    source_entry_ids: Iterable[str] = ()) -> MemoryEntry:
        """Build an entry with a fresh id. Does not insert it."""
        return MemoryEntry(
            id=self.next_id(session_index),
            kind=draft.kind, name=draft.name, summary=draft.summary,
            details=draft.details, steps=draft.steps, proc_type=draft.proc_type,
            source_trajectory_ids=tuple(source_trajectory_ids),
            source_entry_ids=tuple(source_entry_ids),
            created_session=session_index,
        )

    def _check_new(self, entries: list[MemoryEntry], allowed_sources: Optional[set] = None) -> None:
        seen = set()
        for e in entries:
            if e.id in self.entries or e.id in seen:
                raise DuplicateId(e.id)
            seen.add(e.id)
            if self.strict:
                for tid in e.source_trajectory_ids:
                    if tid not in self.trajectory_log:
                        raise DanglingProvenance(tid, "trajectory")
                for sid in e.source_entry_ids:
                    if sid not in self.entries:
                        raise DanglingProvenance(sid, "entry")
            if allowed_sources is not None:
                outside = [s for s in e.source_entry_ids if s not in allowed_sources]
                if outside or not e.source_entry_ids:
                    raise UngroundedSynthesis(
                        f"entry {e.id} cites {outside or 'nothing'} outside the region")

    def _bump_counter(self, entries: list[MemoryEntry]) -> None:
        for e in entries:
            if _is_std_id(e.id):
                self._counter = max(self._counter, parse_entry_id(e.id)[1] + 1)


def _is_std_id(entry_id: str) -> bool:
    parts = entry_id.split("-")
    return len(parts) == 2 and all(p.isdigit() for p in parts)


def insert_entries(bank: MemoryBank, entries: Iterable[MemoryEntry]) -> MemoryBank:
    """Append entries as active. Prior entries are untouched."""
    entries = list(entries)
    bank._check_new(entries)
    for e in entries:
        bank.entries[e.id] = e if e.status == ACTIVE else replace(e, status=ACTIVE)
    bank._bump_counter(entries)
    return bank


def apply_region_rewrite(bank: MemoryBank, region: Iterable[str],
                         replacement: Iterable[MemoryEntry]) -> MemoryBank:
    """Write operator: retire ``region`` and insert ``replacement``.

    Afterwards the active id set is (active_before - region) | replacement.
    Validation happens before any mutation, so a failed call leaves the bank
    as it was.
    """
    region = set(region)
    replacement = list(replacement)
    for rid in sorted(region):
        if rid not in bank.entries:
            raise DanglingProvenance(rid, "entry")
        if bank.entries[rid].status != ACTIVE:
            raise RegionContainsRetired(rid)
    bank._check_new(replacement, allowed_sources=region)
    for rid in region:
        bank.entries[rid] = replace(bank.entries[rid], status=RETIRED)
    for e in replacement:
        bank.entries[e.id] = e if e.status == ACTIVE else replace(e, status=ACTIVE)
    bank._bump_counter(replacement)
    return bank


def writer_ancestors(bank: MemoryBank, entry_id: str) -> list[str]:
    """Writer-level entries reached by following source_entry_ids from
    ``entry_id`` (the entry itself if it was writer-emitted)."""
    out, seen, stack = [], set(), [entry_id]
    while stack:
        eid = stack.pop()
        if eid in seen:
            continue
        seen.add(eid)
        entry = bank.entries[eid]
        if entry.source_entry_ids:
            stack.extend(reversed(entry.source_entry_ids))
        else:
            out.append(eid)
    return out


def provenance_trajectories(bank: MemoryBank, entry_id: str) -> list[str]:
    """Source trajectory ids reached transitively, first-seen order."""
    out: list[str] = []
    for wid in writer_ancestors(bank, entry_id):
        for tid in bank.entries[wid].source_trajectory_ids:
            if tid not in out:
                out.append(tid)
    return out


# -- persistence ---------------------------------------------------------------

ENTRY_FIELDS = ("id", "kind", "name", "summary", "details", "steps", "proc_type",
                "source_trajectory_ids", "source_entry_ids", "created_session",
                "status", "token_count")
TRAJECTORY_FIELDS = ("id", "task_id", "task_family", "instruction", "steps",
                     "success", "final_score", "session_index")


def entry_to_dict(entry: MemoryEntry) -> dict:
    out = {"record_type": "entry"}
    for name in ENTRY_FIELDS:
        value = getattr(entry, name)
        if value is None:
            continue
        if isinstance(value, tuple):
            value = list(value)
        out[name] = value
    return out


def entry_from_dict(d: dict) -> MemoryEntry:
    entry = MemoryEntry(
        id=d["id"], kind=d["kind"], name=d["name"], summary=d["summary"],
        details=d.get("details"),
        steps=tuple(d["steps"]) if d.get("steps") is not None else None,
        proc_type=d.get("proc_type"),
        source_trajectory_ids=tuple(d.get("source_trajectory_ids", ())),
        source_entry_ids=tuple(d.get("source_entry_ids", ())),
        created_session=int(d.get("created_session", 0)),
        status=d.get("status", ACTIVE),
    )
    if "token_count" in d and d["token_count"] != entry.token_count:
        raise MalformedEntry(
            f"entry {entry.id}: stored token_count {d['token_count']} != {entry.token_count}")
    return entry


def trajectory_to_dict(t: TrajectoryRecord) -> dict:
    out = {"record_type": "trajectory"}
    for name in TRAJECTORY_FIELDS:
        value = getattr(t, name)
        if name == "steps":
            value = [{"action": a, "observation": o} for a, o in value]
        out[name] = value
    return out


def trajectory_from_dict(d: dict) -> TrajectoryRecord:
    return TrajectoryRecord(
        id=d["id"], task_id=d["task_id"], task_family=d["task_family"],
        instruction=d["instruction"],
        steps=tuple((s["action"], s["observation"]) for s in d["steps"]),
        success=bool(d["success"]), final_score=float(d["final_score"]),
        session_index=int(d["session_index"]),
    )


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records)


def bank_records(bank: MemoryBank) -> Iterator[dict]:
    for t in bank.trajectory_log.values():
        yield trajectory_to_dict(t)
    for e in bank.entries.values():
        yield entry_to_dict(e)


def save_bank(bank: MemoryBank, path) -> None:
    Path(path).write_text(dumps_jsonl(bank_records(bank)), encoding="utf-8")


def load_bank(path, strict: bool = True) -> MemoryBank:
    bank = MemoryBank(strict=strict)
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.get("record_type")
            if kind == "trajectory":
                bank.log_trajectory(trajectory_from_dict(rec))
            elif kind == "entry":
                entries.append(entry_from_dict(rec))
            else:
                raise ValueError(f"{path}:{lineno}: unknown record_type {kind!r}")
    for e in entries:
        if e.id in bank.entries:
            raise DuplicateId(e.id)
        bank.entries[e.id] = e
    if strict:
        for e in entries:
            for tid in e.source_trajectory_ids:
                if tid not in bank.trajectory_log:
                    raise DanglingProvenance(tid, "trajectory")
            for sid in e.source_entry_ids:
                if sid not in bank.entries:
                    raise DanglingProvenance(sid, "entry")
    bank._sync_counter()
    return bank


def load_entries(path) -> list[MemoryEntry]:
    """Entries from a JSONL file; trajectory lines are ignored."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                if rec.get("record_type", "entry") == "entry":
                    out.append(entry_from_dict(rec))
    return out
