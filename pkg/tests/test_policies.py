
from regionmem.consolidation import WorkingRegion, run_consolidation
from regionmem.env.scripted import avoid_draft, exclusion_draft, location_draft
from regionmem.memory import MemoryBank, TrajectoryRecord
from regionmem.policies import (CopyAllPolicy, DedupAbstractPolicy, RandomToolPolicy, assistant_calls,
                                region_ids)


def bank_of(drafts):
    bank = MemoryBank()
    bank.log_trajectory(TrajectoryRecord("t", "task", "find", "i", (), True, 1.0, 1))
    entries = [bank.materialize(d, 1, ["t"]) for d in drafts]
    bank.entries.update({e.id: e for e in entries})
    return bank, [e.id for e in entries]


def consolidate(drafts, policy, budget=40):
    bank, ids = bank_of(drafts)
    bank, s = run_consolidation(bank, WorkingRegion(bank, ids), policy, turn_budget=budget)
    return bank, s, ids


def details(bank, s):
    return [bank[i].details for i in s.replacement_ids]


def test_copy_all_is_one_to_one():
    drafts = [location_draft("a", "kitchen"), avoid_draft("paper key", "key")]
    bank, s, ids = consolidate(drafts, CopyAllPolicy())
    assert [bank[i].source_entry_ids for i in s.replacement_ids] == [(ids[0],), (ids[1],)]
    assert [bank[i].draft for i in s.replacement_ids] == drafts


def test_dedup_majority_vote_with_earliest_tiebreak():
    drafts = [location_draft("key", "den"), location_draft("key", "bathroom"),
              location_draft("key", "bathroom"), location_draft("cup", "hall"),
              location_draft("cup", "kitchen")]
    bank, s, ids = consolidate(drafts, DedupAbstractPolicy())
    assert details(bank, s) == ["The key is in the bathroom.", "The cup is in the hall."]
    assert bank[s.replacement_ids[0]].source_entry_ids == tuple(ids[:3])


def test_dedup_absorbs_exclusions_and_unions_rooms():
    drafts = [exclusion_draft("key", ["den"]), location_draft("key", "bathroom"),
              exclusion_draft("cup", ["den"]), exclusion_draft("cup", ["hall", "den"])]
    bank, s, ids = consolidate(drafts, DedupAbstractPolicy())
    assert details(bank, s) == ["The key is in the bathroom.", "The cup is not in the den or hall."]
    assert set(bank[s.replacement_ids[0]].source_entry_ids) == {ids[0], ids[1]}


def test_dedup_exact_duplicates_of_other_entries():
    warn = avoid_draft("paper key", "key")
    bank, s, ids = consolidate([warn, warn, avoid_draft("wax apple", "apple")], DedupAbstractPolicy())
    assert [bank[i].draft for i in s.replacement_ids] == [warn, avoid_draft("wax apple", "apple")]


def test_surveys_in_batches_of_thirty():
    drafts = [location_draft(f"obj{i}", "kitchen") for i in range(45)]
    bank, s, _ = consolidate(drafts, CopyAllPolicy(), budget=60)
    checks = [t for t in s.transcript if t.tool == "check_memory"]
    assert len(checks) == 2 and all(t.ok for t in checks)
    assert len(s.replacement_ids) == 45


def test_plan_truncated_to_leave_room_for_terminate():
    drafts = [location_draft(f"obj{i}", "kitchen") for i in range(5)]
    bank, s, _ = consolidate(drafts, CopyAllPolicy(), budget=4)
    assert [t.tool for t in s.transcript] == ["check_memory", "synthesize", "synthesize", "terminate"]


def test_drop_prob_is_seeded_and_keeps_one_group():
    drafts = [location_draft(f"obj{i}", "kitchen") for i in range(6)]
    runs = [consolidate(drafts, DedupAbstractPolicy(drop_prob=0.5, seed=s))[1] for s in (1, 1, 2)]
    counts = [len(s.replacement_ids) for s in runs]
    assert counts[0] == counts[1]
    assert all(c >= 1 for c in counts)
    always = consolidate(drafts, DedupAbstractPolicy(drop_prob=1.0))[1]
    assert len(always.replacement_ids) == 1


def test_policies_are_stateless_across_sessions():
    policy = DedupAbstractPolicy()
    drafts = [location_draft("a", "kitchen"), location_draft("a", "kitchen")]
    first = consolidate(drafts, policy)[1]
    second = consolidate(drafts, policy)[1]
    assert [t.call for t in first.transcript] == [t.call for t in second.transcript]


def test_message_helpers():
    msgs = [{"role": "user", "content": "Reference bank: 2 entries. Turn budget: 5.\nid | type | name | summary\n"
                                        "a | semantic | x | y\nb | procedural | z | w"},
            {"role": "assistant", "content": "terminate()"}]
    assert region_ids(msgs) == ["a", "b"]
    assert assistant_calls(msgs) == ["terminate()"]


def test_random_policy_is_seeded():
    msgs = [{"role": "user", "content": "Reference bank: 1 entries. Turn budget: 5.\na | semantic | x | y"}]
    a, b = RandomToolPolicy(3), RandomToolPolicy(3)
    assert [a("", msgs) for _ in range(20)] == [b("", msgs) for _ in range(20)]
