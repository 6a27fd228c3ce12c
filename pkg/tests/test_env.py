import pytest
from hypothesis import given, settings, strategies as st

from regionmem.env.base import (AlfworldAdapter, ScienceWorldAdapter, StepAfterDone, Task, UnknownTask,
                                WebArenaAdapter)
from regionmem.env.scripted import (ScriptedTaskAgent, avoid_draft, exclusion_draft, location_draft,
                                    parse_memory_facts)
from regionmem.env.toy import (ToyEnv, ToyWorld, generate_tasks, instruction_for, load_tasks,
                               parse_instruction, save_tasks)
from regionmem.episode import run_episode
from regionmem.fixtures import FACT, thermometer_tasks
from regionmem.memory import MemoryBank
from regionmem.retrieval import render_memory_panel
from regionmem.reward import ToyRunner, utility
from regionmem.fixtures import load_bearing


def play(env, task_id, actions):
    out = [env.reset(task_id)]
    for a in actions:
        out.append(env.step(a))
    return out


def find_task(env, obj):
    t = Task(f"find-{obj}", "find", instruction_for("find", obj), {"target": obj})
    env.add_task(t)
    return t


def panel_for(*drafts):
    bank = MemoryBank.local([])
    entries = [bank.materialize(d, 0) for d in drafts]
    return render_memory_panel(entries)


# -- world ----------------------------------------------------------------------------------

def test_default_world_shape(world, toy_tasks):
    assert len(world.rooms) == 6
    fams = [t.family for t in toy_tasks]
    assert {f: fams.count(f) for f in set(fams)} == {"find": 20, "avoid": 20, "fetch": 20}
    assert len({t.task_id for t in toy_tasks}) == 60


def test_instruction_round_trip():
    for fam, target, box in [("find", "seed packet", None), ("avoid", "key", None),
                             ("fetch", "battery", "red box")]:
        assert parse_instruction(instruction_for(fam, target, box)) == (fam, target, box)
    with pytest.raises(ValueError):
        parse_instruction("Dance.")


def test_observation_lists_actions(env):
    obs = env.reset("find-00")
    assert "=== Available Actions ===" in obs and "go to kitchen" in obs
    assert "You are in the hallway." in obs


def test_step_after_done_and_unknown_task(env):
    find_task(env, "umbrella")
    env.reset("find-umbrella")
    _, done, score = env.step("focus on umbrella")
    assert done and score == 1.0
    with pytest.raises(StepAfterDone):
        env.step("look around")
    with pytest.raises(UnknownTask):
        env.reset("nope")


def test_focusing_decoy_scores_minus_one(env):
    t = Task("avoid-key", "avoid", instruction_for("avoid", "key"), {})
    env.add_task(t)
    env.reset(t.task_id)
    env.step("go to bathroom")
    obs, done, score = env.step("focus on paper key")
    assert done and score == -1.0


def test_step_cap_scores_zero(env, world):
    env.reset("find-00")
    results = [env.step("look around") for _ in range(world.max_steps)]
    assert [r[1] for r in results] == [False] * (world.max_steps - 1) + [True]
    assert results[-1][2] == 0.0


def test_fetch_task(env):
    t = Task("fetch-x", "fetch", instruction_for("fetch", "battery", "red box"), {})
    env.add_task(t)
    env.reset(t.task_id)
    env.step("go to workshop")
    env.step("pick up battery")
    env.step("go to bathroom")
    _, done, score = env.step("put battery in red box")
    assert done and score == 1.0


def test_invalid_action_consumes_a_step(env):
    env.reset("find-00")
    obs, done, _ = env.step("fly away")
    assert "not available" in obs and not done


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["go to kitchen", "go to bathroom", "focus on towel", "look around",
                                 "pick up towel", "go to hallway", "focus on umbrella"]), max_size=6))
def test_toy_env_is_deterministic(actions):
    def run():
        env = ToyEnv()
        out = [env.reset("find-00")]
        for a in actions:
            try:
                out.append(env.step(a))
            except StepAfterDone:
                out.append("done")
        return out
    assert run() == run()


def test_done_at_most_once(env):
    env.reset("find-00")
    dones = 0
    for a in ["go to kitchen"] * 10:
        try:
            dones += env.step(a)[1]
        except StepAfterDone:
            break
    assert dones == 1


def test_generated_world_keeps_fillers():
    base, w = ToyWorld.default(), ToyWorld.generate(7)
    assert all(w.locations[f] == base.locations[f] for f in base.fillers)
    assert w == ToyWorld.generate(7)


def test_task_files_round_trip(tmp_path, world):
    tasks = generate_tasks(world, per_family=2, seed=1)
    save_tasks(tasks, tmp_path / "t.json")
    assert load_tasks(tmp_path / "t.json") == tasks
    (tmp_path / "t.jsonl").write_text("\n".join(
        '{"task_id": "%s", "family": "%s", "instruction": "%s"}' % (t.task_id, t.family, t.instruction)
        for t in tasks))
    assert load_tasks(tmp_path / "t.jsonl") == tasks


@pytest.mark.parametrize("cls", [AlfworldAdapter, ScienceWorldAdapter, WebArenaAdapter])
def test_external_adapters_are_stubs(cls):
    with pytest.raises(NotImplementedError):
        cls().reset("x")


# -- scripted agent -------------------------------------------------------------------------

def test_location_memory_moves_toward_room(env, agent):
    find_task(env, "thermometer")
    obs = env.reset("find-thermometer")
    agent.reset(instruction_for("find", "thermometer"))
    assert agent.act(obs, panel_for(FACT)) == "go to bathroom"


def test_contradictory_memories_follow_panel_order(env, agent):
    find_task(env, "thermometer")
    obs = env.reset("find-thermometer")
    agent.reset(instruction_for("find", "thermometer"))
    panel = panel_for(location_draft("thermometer", "kitchen"), FACT)
    assert agent.act(obs, panel) == "go to kitchen"


def test_empty_panel_searches_canonically(env, agent, world):
    find_task(env, "thermometer")
    obs = env.reset("find-thermometer")
    agent.reset(instruction_for("find", "thermometer"))
    assert agent.act(obs, "") == f"go to {world.rooms[1]}"


def test_exclusion_skips_rooms(env, agent):
    find_task(env, "thermometer")
    obs = env.reset("find-thermometer")
    agent.reset(instruction_for("find", "thermometer"))
    panel = panel_for(exclusion_draft("thermometer", ["kitchen", "workshop"]))
    assert agent.act(obs, panel) == "go to greenhouse"


def test_avoid_memory_skips_decoy(env, agent):
    t = Task("avoid-key", "avoid", instruction_for("avoid", "key"), {})
    env.add_task(t)
    bank = MemoryBank.local([])
    entries = [bank.materialize(d, 0) for d in (location_draft("key", "bathroom"),
                                                avoid_draft("paper key", "key"))]
    bank = MemoryBank.local(entries)
    res = run_episode(env, agent, t, bank)
    assert res.success and res.steps[-1][0] == "focus on key"


def test_memory_facts_parser():
    facts = parse_memory_facts("The key is in the bathroom. The key is in the den. "
                               "The cup is not in the den, hall, or attic. Never focus on the paper key; x")
    assert facts.locations == {"key": "bathroom"}
    assert facts.exclusions == {"cup": {"den", "hall", "attic"}}
    assert facts.avoid == {"paper key"}


def test_with_memory_solves_every_find_within_four_steps(world):
    for obj in world.findables:
        env = ToyEnv(world)
        t = find_task(env, obj)
        bank = MemoryBank.local([])
        bank = MemoryBank.local([bank.materialize(location_draft(obj, world.locations[obj]), 0)])
        res = run_episode(env, ScriptedTaskAgent(world.rooms), t, bank)
        assert res.success and len(res.steps) <= 4


def test_without_memory_success_below_one(world, toy_tasks):
    env = ToyEnv(world, toy_tasks)
    finds = [t for t in toy_tasks if t.family == "find"]
    results = [run_episode(env, ScriptedTaskAgent(world.rooms), t, MemoryBank()) for t in finds]
    rate = sum(r.success for r in results) / len(results)
    assert rate < 1.0


def test_with_memory_is_shorter_than_without(world):
    env = ToyEnv(world)
    t = find_task(env, "battery")
    bare = run_episode(env, ScriptedTaskAgent(world.rooms), t, MemoryBank())
    bank = MemoryBank.local([MemoryBank.local([]).materialize(location_draft("battery", "workshop"), 0)])
    helped = run_episode(env, ScriptedTaskAgent(world.rooms), t, bank)
    assert bare.success and helped.success and len(helped.steps) < len(bare.steps)


def test_single_entry_memory_sensitivity():
    runner = ToyRunner(top_k_cap=3, token_budget=1500, refresh_every=8)
    gap = utility(load_bearing(), thermometer_tasks(), runner) - utility([], thermometer_tasks(), runner)
    assert gap >= 0.3


def test_episode_determinism(world, toy_tasks):
    def run():
        env = ToyEnv(world, toy_tasks)
        return [run_episode(env, ScriptedTaskAgent(world.rooms), t, MemoryBank()).steps for t in toy_tasks]
    assert run() == run()
