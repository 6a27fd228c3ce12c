"""Group rollouts for consolidator training, without the gradient step.

A step samples support trajectories from an offline pool, forms the region
of their writer entries, runs G consolidation sessions over snapshots of the
same region, scores each replacement set on its own local bank and attaches
group-relative advantages. Records are emitted as JSONL for an external
trainer.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .consolidation import DEFAULT_TURN_BUDGET, ConsolidatorPolicy, WorkingRegion, run_consolidation
from .env.base import Task
from .env.scripted import ScriptedTaskAgent
from .env.toy import ToyEnv, ToyWorld
from .episode import run_episode
from .memory import MemoryBank, TrajectoryRecord, entry_to_dict, insert_entries
from .reward import (AgentRunner, GroupTooSmall, RewardConfig, ToyRunner, UtilityCache,
                     composite_reward, counterfactual_reward, format_penalty, grpo_advantages)
from .writer import WriterPolicy, session_entries

log = logging.getLogger(__name__)


class PoolTooSmall(ValueError):
    pass


TRAINER_PASSTHROUGH = {"groups_per_prompt": 10, "evaluations_per_sample": 12,
                       "min_groups_per_task_type": 20}


@dataclass
class TrainingConfig:
    group_size: int = 8
    support_size: int = 4
    seed: int = 0
    turn_budget: int = DEFAULT_TURN_BUDGET
    env_profile: str = "toy"
    reward: RewardConfig = field(default_factory=RewardConfig)
    trainer: dict = field(default_factory=lambda: dict(TRAINER_PASSTHROUGH))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingStepRecord:
    step_index: int
    region_ids: list
    support_trajectory_ids: list
    rollouts: list
    config: dict
    seeds: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingStepRecord":
        return cls(d["step_index"], d["region_ids"], d["support_trajectory_ids"], d["rollouts"],
                   d["config"], d["seeds"])


def collect_toy_trajectories(tasks: Sequence[Task], world=None, id_prefix: str = "pool",
                             bank: Optional[MemoryBank] = None) -> list[TrajectoryRecord]:
    """Scripted-agent trajectories, one per task, reading from ``bank``
    (memoryless when omitted)."""
    world = world or ToyWorld.default()
    env = ToyEnv(world, list(tasks))
    agent = ScriptedTaskAgent(world.rooms)
    bank = bank if bank is not None else MemoryBank()
    out = []
    for i, task in enumerate(tasks, start=1):
        result = run_episode(env, agent, task, bank)
        out.append(result.trajectory(f"{id_prefix}-{i:05d}", i))
    return out


def build_offline_pool(trajectories: Sequence[TrajectoryRecord], writer_policy: WriterPolicy,
                       env_profile: str = "toy", errors: Optional[list] = None) -> MemoryBank:
    """Log every trajectory and insert the writer's entries for each.
    Writer failures skip that trajectory's entries and are appended to
    ``errors`` when given."""
    pool = MemoryBank()
    for traj in trajectories:
        pool.log_trajectory(traj)
        try:
            entries, _ = session_entries(pool, traj, writer_policy, env_profile)
        except Exception as exc:
            log.warning("writer failed on %s: %s", traj.id, exc)
            if errors is not None:
                errors.append({"trajectory_id": traj.id, "error": f"{type(exc).__name__}: {exc}"})
            continue
        insert_entries(pool, entries)
    return pool


def _rng(*seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(seed))))


def sample_support(pool: MemoryBank, J: int, seed: int) -> list[str]:
    ids = sorted(pool.trajectory_log)
    if J < 1 or J > len(ids):
        raise PoolTooSmall(f"need {J} trajectories, pool has {len(ids)}")
    picks = _rng(seed).choice(len(ids), size=J, replace=False)
    return sorted(ids[int(i)] for i in picks)


def sample_training_region(pool: MemoryBank, J: int, seed: int) -> WorkingRegion:
    support = set(sample_support(pool, J, seed))
    ids = [e.id for e in pool.active()
           if not e.source_entry_ids and support.intersection(e.source_trajectory_ids)]
    return WorkingRegion(pool, ids)


def run_training_step(pool: MemoryBank, eval_tasks: Sequence[Task], policy, config: TrainingConfig,
                      step_index: int = 0, agent_runner: Optional[AgentRunner] = None
                      ) -> TrainingStepRecord:
    """``policy`` is one consolidator policy (reused for every rollout) or a
    sequence of policies assigned to rollouts round-robin."""
    G = config.group_size
    if G < 2:
        raise GroupTooSmall(f"group size must be >= 2, got {G}")
    policies = list(policy) if isinstance(policy, (list, tuple)) else [policy]
    runner = agent_runner or ToyRunner(binary=config.reward.binary_return)
    region_seed = config.seed * 1_000_003 + step_index
    support = sample_support(pool, config.support_size, region_seed)
    region = sample_training_region(pool, config.support_size, region_seed)
    cache = UtilityCache(eval_tasks, runner)

    rollouts = []
    for g in range(G):
        rollouts.append(_rollout(pool, region, policies[g % len(policies)], eval_tasks, runner,
                                 config, cache, g))
    composites = [r["composite"] for r in rollouts]
    for r, a in zip(rollouts, grpo_advantages(composites)):
        r["advantage"] = a
    return TrainingStepRecord(step_index, region.sorted_ids(), support, rollouts, config.to_dict(),
                              {"region_seed": region_seed, "mask_seed": config.reward.mask_seed})


def _rollout(pool: MemoryBank, region: WorkingRegion, policy: ConsolidatorPolicy, eval_tasks,
             runner, config: TrainingConfig, cache: UtilityCache, g: int) -> dict:
    snapshot = pool.copy()
    session_index = max((e.created_session for e in pool.entries.values()), default=0) + 1
    _, session = run_consolidation(snapshot, WorkingRegion(snapshot, region.entry_ids), policy,
                                   turn_budget=config.turn_budget, session_index=session_index)
    replacement = [snapshot[i] for i in session.replacement_ids] if session.applied else []
    cf, diag = counterfactual_reward(replacement, eval_tasks, runner, config.reward, cache=cache)
    fmt = format_penalty(session)
    u = diag["utility"]
    return {
        "rollout_index": g,
        "transcript": [t.to_dict() for t in session.transcript],
        "drafts": [d.to_dict() for d in session.output_drafts],
        "replacement": [entry_to_dict(e) for e in replacement],
        "termination_reason": session.termination_reason,
        "applied": session.applied,
        "utility": u,
        "cf": cf,
        "cf_exact": cf if diag["exact"] else None,
        "mask_utilities": [[list(ids), v] for ids, v in diag["masks"]],
        "format_penalty": fmt,
        "composite": composite_reward(u, cf, fmt, config.reward),
    }


def emit_training_data(pool: MemoryBank, eval_tasks: Sequence[Task], policy, config: TrainingConfig,
                       steps: int, path, agent_runner: Optional[AgentRunner] = None) -> list[TrainingStepRecord]:
    records = []
    with open(Path(path), "w", encoding="utf-8") as fh:
        for step in range(steps):
            rec = run_training_step(pool, eval_tasks, policy, config, step, agent_runner)
            fh.write(rec.to_json() + "\n")
            fh.flush()
            records.append(rec)
    return records


def verify_record(record: TrainingStepRecord, tol: float = 1e-12) -> bool:
    """Stored advantages match a recomputation from the stored composites."""
    if len(record.rollouts) != record.config["group_size"]:
        return False
    recomputed = grpo_advantages([r["composite"] for r in record.rollouts])
    return all(abs(a - r["advantage"]) <= tol for a, r in zip(recomputed, record.rollouts))
