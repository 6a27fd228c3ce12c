import json

import pytest
from hypothesis import given, strategies as st

from _oracles import ceil_bytes_over_4
from _strategies import drafts
from conftest import check_golden
from regionmem.memory import (ACTIVE, PROCEDURAL, RETIRED, SEMANTIC, ByteTokenizer, DanglingProvenance,
                              DuplicateId, EntryDraft, MalformedEntry, MemoryBank, MemoryEntry,
                              RegionContainsRetired, TrajectoryRecord, UngroundedSynthesis,
                              apply_region_rewrite, count_tokens, entry_from_dict, entry_to_dict,
                              format_entry_id, insert_entries, load_bank, parse_entry_id,
                              provenance_trajectories, render_entry, save_bank, set_tokenizer,
                              writer_ancestors)


def traj(tid="t1", session=1):
    return TrajectoryRecord(tid, "task", "find", "Find the x.", (("go to kitchen", "ok"),), True, 1.0, session)


def bank_with_traj(*tids):
    bank = MemoryBank()
    for i, t in enumerate(tids or ("t1",), 1):
        bank.log_trajectory(traj(t, i))
    return bank


def sem(bank, name="n", details="d", session=1, traj_ids=("t1",), src=()):
    return bank.materialize(EntryDraft(SEMANTIC, name, "s", details=details), session, traj_ids, src)


# -- shape -----------------------------------------------------------------------

def test_semantic_requires_details_and_no_steps():
    with pytest.raises(MalformedEntry):
        EntryDraft(SEMANTIC, "n", "s")
    with pytest.raises(MalformedEntry):
        EntryDraft(SEMANTIC, "n", "s", details="d", steps=("a",))


def test_procedural_requires_steps_and_type():
    with pytest.raises(MalformedEntry):
        EntryDraft(PROCEDURAL, "n", "s", steps=(), proc_type="workflow")
    with pytest.raises(MalformedEntry):
        EntryDraft(PROCEDURAL, "n", "s", steps=("a",), proc_type="recipe")
    with pytest.raises(MalformedEntry):
        EntryDraft(PROCEDURAL, "n", "s", details="d", steps=("a",), proc_type="guide")


def test_unknown_kind_and_status_rejected():
    with pytest.raises(MalformedEntry):
        EntryDraft("episodic", "n", "s", details="d")
    with pytest.raises(MalformedEntry):
        MemoryEntry("a", SEMANTIC, "n", "s", details="d", status="deleted")


# -- tokens and rendering -----------------------------------------------------------

def test_token_examples():
    assert count_tokens("") == 0
    assert count_tokens("abcdefgh") == 2
    assert count_tokens("abcdefghi") == 3
    assert count_tokens("é") == 1          # 2 bytes


@given(st.text(), st.text())
def test_token_count_matches_oracle_and_is_monotone(a, b):
    assert count_tokens(a) == ceil_bytes_over_4(a)
    assert count_tokens(a + b) >= max(count_tokens(a), count_tokens(b))


@given(drafts)
def test_token_count_tracks_render(draft):
    e = MemoryEntry("00001-000000", draft.kind, draft.name, draft.summary, draft.details, draft.steps,
                    draft.proc_type)
    assert e.token_count == count_tokens(render_entry(e))


def test_pluggable_tokenizer():
    class WordTokenizer:
        def count(self, text):
            return len(text.split())
    try:
        set_tokenizer(WordTokenizer())
        assert count_tokens("a b c") == 3
        e = MemoryEntry("x", SEMANTIC, "n", "s s", details="d")
        assert e.token_count == 4
    finally:
        set_tokenizer(ByteTokenizer())
    assert count_tokens("a b c") == 2


def test_render_semantic_order():
    e = MemoryEntry("a", SEMANTIC, "x", "y", details="z")
    assert render_entry(e) == "x\ny\nz"


def test_render_procedural_numbered_steps():
    e = MemoryEntry("a", PROCEDURAL, "p", "q", steps=("first", "second"), proc_type="workflow")
    text = render_entry(e)
    assert text.index("1. first") < text.index("2. second")


def test_render_golden(world):
    from regionmem.env.scripted import PROCEDURES, location_draft
    loc = location_draft("thermometer", "bathroom")
    e1 = MemoryEntry("00001-000000", SEMANTIC, loc.name, loc.summary, details=loc.details)
    p = PROCEDURES["fetch"]
    e2 = MemoryEntry("00001-000001", PROCEDURAL, p.name, p.summary, steps=p.steps, proc_type=p.proc_type)
    text = render_entry(e1) + "\n---\n" + render_entry(e2) + "\n"
    check_golden("render_entry.txt", text)
    assert (e1.token_count, e2.token_count) == (ceil_bytes_over_4(render_entry(e1)),
                                                ceil_bytes_over_4(render_entry(e2)))


# -- ids ----------------------------------------------------------------------------

def test_ids_sort_in_creation_order_and_are_never_reused():
    bank = bank_with_traj("t1")
    ids = [bank.next_id(s) for s in (1, 1, 2, 10, 10)]
    assert ids == sorted(ids)
    assert len(set(ids)) == len(ids)
    assert parse_entry_id(format_entry_id(12, 7)) == (12, 7)


def test_counter_resumes_after_load(tmp_path):
    bank = bank_with_traj("t1")
    insert_entries(bank, [sem(bank), sem(bank)])
    save_bank(bank, tmp_path / "b.jsonl")
    again = load_bank(tmp_path / "b.jsonl")
    new = sem(again)
    assert new.id not in bank.entries
    assert parse_entry_id(new.id)[1] == 2


# -- insert ---------------------------------------------------------------------------

def test_insert_into_empty_bank():
    bank = bank_with_traj("t1")
    insert_entries(bank, [sem(bank)])
    assert len(bank.active()) == 1


def test_insert_dangling_trajectory_names_missing_id():
    bank = bank_with_traj("t1")
    with pytest.raises(DanglingProvenance) as err:
        insert_entries(bank, [sem(bank, traj_ids=("ghost",))])
    assert "ghost" in str(err.value)


def test_insert_duplicate_id():
    bank = bank_with_traj("t1")
    e = sem(bank)
    insert_entries(bank, [e])
    with pytest.raises(DuplicateId):
        insert_entries(bank, [e])


def test_insert_three_writer_entries_token_sum(env, agent, rule_writer):
    from regionmem.env.base import Task
    from regionmem.env.scripted import avoid_draft
    from regionmem.env.toy import instruction_for
    from regionmem.episode import run_episode
    from regionmem.writer import write_session
    task = Task("avoid-x", "avoid", instruction_for("avoid", "apple"), {})
    env.add_task(task)
    warn = avoid_draft("wax apple", "apple")
    hint = MemoryBank.local([MemoryEntry("h", SEMANTIC, warn.name, warn.summary, details=warn.details)])
    result = run_episode(env, agent, task, hint)
    assert result.success
    bank = MemoryBank()
    t = result.trajectory("traj-1", 1)
    bank.log_trajectory(t)
    write_session(bank, t, rule_writer, "toy")
    assert [e.name for e in bank.active()] == ["apple_location", "focus_without_decoys", "avoid_wax_apple"]
    texts = [
        "apple_location\nWhere the apple is kept\nThe apple is in the kitchen.",
        "focus_without_decoys\nHow to focus on an object that has look-alike decoys\n"
        "1. go to the room where the object is kept\n2. skip look-alike decoys\n3. focus on the plain object",
        "avoid_wax_apple\nDecoy that looks like the apple\nNever focus on the wax apple; focusing it "
        "ends the episode. Focus on the plain apple instead.",
    ]
    assert bank.active_tokens() == sum(-(-len(x.encode()) // 4) for x in texts)


# -- region rewrite ------------------------------------------------------------------------

def test_rewrite_identity():
    bank = bank_with_traj("t1")
    insert_entries(bank, [sem(bank)])
    before = bank.copy()
    apply_region_rewrite(bank, set(), [])
    assert bank == before


def test_rewrite_set_algebra():
    bank = bank_with_traj("t1")
    a, b, c, d = (sem(bank, name=n) for n in "abcd")
    insert_entries(bank, [a, b, c, d])
    s1 = sem(bank, name="s1", session=2, traj_ids=("t1",), src=(a.id, b.id))
    apply_region_rewrite(bank, {a.id, b.id, c.id}, [s1])
    assert bank.active_ids() == {d.id, s1.id}
    assert {e.id for e in bank.retired()} == {a.id, b.id, c.id}
    assert all(x in bank for x in (a.id, b.id, c.id))


def test_rewrite_ungrounded():
    bank = bank_with_traj("t1")
    a, b = sem(bank, name="a"), sem(bank, name="b")
    insert_entries(bank, [a, b])
    s = sem(bank, src=(b.id,))
    before = bank.copy()
    with pytest.raises(UngroundedSynthesis):
        apply_region_rewrite(bank, {a.id}, [s])
    assert bank == before
    with pytest.raises(UngroundedSynthesis):
        apply_region_rewrite(bank, {a.id}, [sem(bank, src=())])


def test_rewrite_rejects_retired_region_member():
    bank = bank_with_traj("t1")
    a = sem(bank)
    insert_entries(bank, [a])
    apply_region_rewrite(bank, {a.id}, [])
    with pytest.raises(RegionContainsRetired):
        apply_region_rewrite(bank, {a.id}, [])


def test_rewrite_duplicate_replacement_id():
    bank = bank_with_traj("t1")
    a = sem(bank)
    insert_entries(bank, [a])
    s = sem(bank, src=(a.id,))
    with pytest.raises(DuplicateId):
        apply_region_rewrite(bank, {a.id}, [s, s])


def test_provenance_resolves_transitively():
    bank = bank_with_traj("t1", "t2", "t3")
    a = sem(bank, name="a", traj_ids=("t1",))
    b = sem(bank, name="b", traj_ids=("t2", "t1"))
    c = sem(bank, name="c", traj_ids=("t3",))
    insert_entries(bank, [a, b, c])
    s1 = sem(bank, name="s1", traj_ids=("t1", "t2"), src=(a.id, b.id))
    apply_region_rewrite(bank, {a.id, b.id}, [s1])
    s2 = sem(bank, name="s2", traj_ids=("t1", "t2", "t3"), src=(s1.id, c.id))
    apply_region_rewrite(bank, {s1.id, c.id}, [s2])
    assert writer_ancestors(bank, s2.id) == [a.id, b.id, c.id]
    assert provenance_trajectories(bank, s2.id) == ["t1", "t2", "t3"]


# -- persistence ------------------------------------------------------------------------

def test_bank_jsonl_round_trip(tmp_path):
    bank = bank_with_traj("t1", "t2")
    a = sem(bank, details="multi\nline é")
    p = bank.materialize(EntryDraft(PROCEDURAL, "p", "s", steps=("x", "y"), proc_type="guide"), 2, ("t2",))
    insert_entries(bank, [a, p])
    apply_region_rewrite(bank, {a.id}, [sem(bank, src=(a.id,), session=3)])
    path = tmp_path / "bank.jsonl"
    save_bank(bank, path)
    again = load_bank(path)
    assert again == bank
    for line in path.read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        assert rec["record_type"] in ("entry", "trajectory")
    assert any(json.loads(l).get("status") == RETIRED for l in path.read_text().splitlines())


def test_load_rejects_tampered_token_count():
    e = MemoryEntry("a", SEMANTIC, "n", "s", details="d")
    d = entry_to_dict(e)
    d["token_count"] += 1
    with pytest.raises(MalformedEntry):
        entry_from_dict(d)


def test_load_strict_rejects_dangling(tmp_path):
    e = MemoryEntry("a", SEMANTIC, "n", "s", details="d", source_trajectory_ids=("ghost",))
    path = tmp_path / "b.jsonl"
    path.write_text(json.dumps(entry_to_dict(e)) + "\n")
    with pytest.raises(DanglingProvenance):
        load_bank(path)
    assert len(load_bank(path, strict=False)) == 1


def test_local_bank_accepts_foreign_provenance():
    e = MemoryEntry("a", SEMANTIC, "n", "s", details="d", source_entry_ids=("elsewhere",),
                    status=RETIRED)
    local = MemoryBank.local([e])
    assert local.active_ids() == {"a"}
    assert local["a"].status == ACTIVE
