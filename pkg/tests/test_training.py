import json

import pytest

from regionmem.env.base import Task
from regionmem.env.scripted import ToyRuleWriter, location_draft
from regionmem.env.toy import ToyWorld, instruction_for
from regionmem.fixtures import load_bearing, thermometer_pool_tasks, thermometer_tasks
from regionmem.memory import MemoryBank
from regionmem.policies import CopyAllPolicy, DedupAbstractPolicy, ErrorPolicy
from regionmem.reward import GroupTooSmall
from regionmem.training import (PoolTooSmall, TrainingConfig, TrainingStepRecord, build_offline_pool,
                                collect_toy_trajectories, emit_training_data, run_training_step,
                                sample_support, sample_training_region, verify_record)

WORLD = ToyWorld.default()
FETCH_PAIRS = [("candle", "blue box"), ("sink", "blue box"), ("towel", "red box"),
               ("thermometer", "red box"), ("battery", "blue box")]


def hint_bank(objects):
    scratch = MemoryBank.local([])
    return MemoryBank.local([scratch.materialize(location_draft(o, WORLD.locations[o]), 0) for o in objects])


def fetch_pool():
    """Five successful fetch trajectories; the rule writer emits two
    location facts and the fetch procedure for each (15 entries)."""
    tasks = [Task(f"pool-fetch-{i}", "fetch", instruction_for("fetch", o, c), {})
             for i, (o, c) in enumerate(FETCH_PAIRS)]
    trajs = collect_toy_trajectories(tasks, bank=hint_bank(["towel", "thermometer", "battery", "red box"]))
    return build_offline_pool(trajs, ToyRuleWriter(WORLD.decoys))


def duplicate_pool():
    trajs = collect_toy_trajectories(thermometer_pool_tasks(2), bank=MemoryBank.local(load_bearing()))
    return build_offline_pool(trajs, ToyRuleWriter(WORLD.decoys))


# -- pool --------------------------------------------------------------------------------------

def test_empty_pool():
    pool = build_offline_pool([], ToyRuleWriter())
    assert len(pool) == 0 and not pool.trajectory_log


def test_fixture_pool_entry_count():
    pool = fetch_pool()
    assert len(pool.trajectory_log) == 5 and len(pool.active()) == 15
    for tid in pool.trajectory_log:
        assert sum(tid in e.source_trajectory_ids for e in pool.active()) == 3


def test_pool_is_deterministic():
    a, b = fetch_pool(), fetch_pool()
    assert a == b and sorted(a.entries) == sorted(b.entries)


def test_writer_failures_are_skipped_and_recorded():
    trajs = collect_toy_trajectories(thermometer_pool_tasks(2), bank=MemoryBank.local(load_bearing()))
    calls = iter([ConnectionError("down"), None])

    def flaky(prompt):
        exc = next(calls)
        if exc:
            raise exc
        return ToyRuleWriter(WORLD.decoys)(prompt)
    errors = []
    pool = build_offline_pool(trajs, flaky, errors=errors)
    assert len(pool.trajectory_log) == 2
    assert [e["trajectory_id"] for e in errors] == [trajs[0].id]
    assert all(trajs[0].id not in e.source_trajectory_ids for e in pool.active())


# -- region sampling -----------------------------------------------------------------------------

def test_region_with_whole_pool_is_all_writer_entries():
    pool = fetch_pool()
    assert sample_training_region(pool, 5, seed=0).entry_ids == pool.active_ids()


def test_region_with_one_trajectory_has_its_three_entries():
    pool = fetch_pool()
    region = sample_training_region(pool, 1, seed=11)
    (tid,) = sample_support(pool, 1, seed=11)
    assert len(region) == 3
    assert all(pool[i].source_trajectory_ids == (tid,) for i in region.entry_ids)


def test_region_sampling_is_seeded():
    pool = fetch_pool()
    assert sample_training_region(pool, 2, 7).entry_ids == sample_training_region(pool, 2, 7).entry_ids
    supports = {tuple(sample_support(pool, 2, s)) for s in range(20)}
    assert len(supports) > 1


def test_pool_too_small():
    with pytest.raises(PoolTooSmall):
        sample_support(fetch_pool(), 6, 0)
    with pytest.raises(PoolTooSmall):
        sample_support(fetch_pool(), 0, 0)


# -- steps -----------------------------------------------------------------------------------

def config(G=2, J=2, **kw):
    return TrainingConfig(group_size=G, support_size=J, **kw)


def test_group_of_one_rejected():
    with pytest.raises(GroupTooSmall):
        run_training_step(duplicate_pool(), thermometer_tasks(), DedupAbstractPolicy(), config(G=1))


def test_deterministic_policy_gives_zero_advantages():
    rec = run_training_step(duplicate_pool(), thermometer_tasks(), DedupAbstractPolicy(), config(G=4))
    assert len(rec.rollouts) == 4
    assert len({r["composite"] for r in rec.rollouts}) == 1
    assert [r["advantage"] for r in rec.rollouts] == [0.0] * 4


def test_dedup_beats_copy_on_duplicates():
    rec = run_training_step(duplicate_pool(), thermometer_tasks(),
                            [DedupAbstractPolicy(), CopyAllPolicy()], config(G=2))
    dedup, copy = rec.rollouts
    assert dedup["composite"] > copy["composite"]
    assert dedup["cf"] > copy["cf"]
    assert dedup["advantage"] > 0 > copy["advantage"]


def test_failed_rollout_scores_as_empty_bank():
    rec = run_training_step(duplicate_pool(), thermometer_tasks(),
                            [DedupAbstractPolicy(), ErrorPolicy()], config(G=2))
    failed = rec.rollouts[1]
    assert not failed["applied"] and failed["replacement"] == [] and failed["utility"] == 0.0
    assert failed["cf"] == 0.0


def test_pool_is_not_mutated():
    pool = duplicate_pool()
    before = pool.copy()
    run_training_step(pool, thermometer_tasks(), DedupAbstractPolicy(), config())
    assert pool == before


def test_local_bank_isolation():
    seen = []

    def spy(task, bank):
        seen.append(set(bank.entries))
        return 1.0
    pool = duplicate_pool()
    rec = run_training_step(pool, thermometer_tasks(), [DedupAbstractPolicy(), CopyAllPolicy()],
                            config(), agent_runner=spy)
    allowed = set()
    for r in rec.rollouts:
        allowed |= {e["id"] for e in r["replacement"]}
    assert all(s <= allowed for s in seen)
    assert all(not (s & pool.active_ids()) for s in seen)


def test_record_verifies_and_replays_byte_for_byte(tmp_path):
    pool = duplicate_pool()
    policies = [DedupAbstractPolicy(drop_prob=0.5, seed=1), CopyAllPolicy()]
    cfg = config(G=4, seed=3)
    a = emit_training_data(pool, thermometer_tasks(), policies, cfg, 2, tmp_path / "a.jsonl")
    b = emit_training_data(duplicate_pool(), thermometer_tasks(), policies, cfg, 2, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert all(verify_record(r) for r in a + b)
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    back = TrainingStepRecord.from_dict(json.loads(lines[0]))
    assert back.to_json() == a[0].to_json()
    assert back.config["trainer"] == {"groups_per_prompt": 10, "evaluations_per_sample": 12,
                                      "min_groups_per_task_type": 20}


def test_tampered_record_fails_verification():
    rec = run_training_step(duplicate_pool(), thermometer_tasks(),
                            [DedupAbstractPolicy(), CopyAllPolicy()], config())
    rec.rollouts[0]["advantage"] += 0.1
    assert not verify_record(rec)


def test_rollout_fields():
    rec = run_training_step(duplicate_pool(), thermometer_tasks(), DedupAbstractPolicy(), config())
    r = rec.rollouts[0]
    assert set(r) >= {"transcript", "drafts", "utility", "cf", "format_penalty", "composite", "advantage"}
    assert rec.seeds == {"region_seed": 0, "mask_seed": 0}
    assert rec.region_ids and set(rec.support_trajectory_ids) <= set(duplicate_pool().trajectory_log)
