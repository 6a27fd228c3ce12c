"""One task episode with memory: initial Read, panel injection and the
periodic in-episode refresh."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Protocol

from .env.base import EnvAdapter, Task
from .memory import MemoryBank, TrajectoryRecord, count_tokens
from .retrieval import Embedder, read, refresh_query, render_memory_panel

log = logging.getLogger(__name__)


class TaskAgent(Protocol):
    def reset(self, instruction: str) -> None: ...

    def act(self, observation: str, memory: str) -> str: ...


@dataclass
class EpisodeResult:
    task: Task
    steps: list = field(default_factory=list)        # (action, observation)
    final_score: float = 0.0
    success: bool = False
    retrieved_ids: list = field(default_factory=list)
    retrieved_tokens: int = 0
    refresh_ids: list = field(default_factory=list)
    error: Optional[str] = None
    agent_calls: int = 0
    agent_prompt_tokens: int = 0

    def trajectory(self, trajectory_id: str, session_index: int) -> TrajectoryRecord:
        steps = self.steps or [("<none>", self.error or "episode produced no steps")]
        return TrajectoryRecord(trajectory_id, self.task.task_id, self.task.family, self.task.instruction,
                                tuple(steps), self.success, self.final_score, session_index)


def run_episode(env: EnvAdapter, agent: TaskAgent, task: Task, bank: MemoryBank, *,
                top_k_cap: int = 3, token_budget: int = 1500, refresh_every: int = 8,
                refresh_last_k_actions: int = 3, max_agent_steps: Optional[int] = None,
                embedder: Optional[Embedder] = None) -> EpisodeResult:
    """Run one episode against ``bank`` (read-only here).

    Environment exceptions end the episode with the env's minimum score.
    Refresh entries are appended once and stay in context.
    """
    result = EpisodeResult(task)
    initial = read(task.instruction, bank, top_k_cap, token_budget, embedder)
    result.retrieved_ids = initial.ids
    result.retrieved_tokens = initial.total_tokens
    context = [bank[i] for i in initial.ids]
    memory = render_memory_panel(context)
    cap = max_agent_steps or getattr(env, "max_steps", 50)
    actions: list[str] = []
    done, score = False, None
    try:
        obs = env.reset(task.task_id)
        agent.reset(task.instruction)
        for t in range(1, cap + 1):
            action = agent.act(obs, memory)
            result.agent_calls += 1
            result.agent_prompt_tokens += count_tokens(memory) + count_tokens(obs)
            obs, done, score = env.step(action)
            result.steps.append((action, obs))
            actions.append(action)
            if done:
                break
            if refresh_every and t % refresh_every == 0:
                query = refresh_query(task.instruction, actions, obs, last_k=refresh_last_k_actions)
                top = read(query, bank, 1, token_budget, embedder)
                for entry_id in top.ids:
                    result.refresh_ids.append(entry_id)
                    if all(e.id != entry_id for e in context):
                        context.append(bank[entry_id])
                        memory = render_memory_panel(context)
    except Exception as exc:  # the stream must not abort on env failures
        log.warning("episode %s failed: %s", task.task_id, exc)
        result.error = f"{type(exc).__name__}: {exc}"
        done, score = True, getattr(env, "min_score", -1.0)
    result.final_score = float(score) if done and score is not None else 0.0
    result.success = result.final_score >= 1.0
    return result
