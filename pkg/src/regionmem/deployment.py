"""Prequential online runner.

Each task is attempted once, in the given order, with Read against the bank
built from strictly earlier tasks. After the episode the trajectory is logged
and written; every ``cadence_k`` sessions the interval's working region is
consolidated.
"""
from __future__ import annotations

import json
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .consolidation import (DEFAULT_TURN_BUDGET, ConsolidatorPolicy, IntervalLog, run_consolidation,
                            select_working_region)
from .env.base import EnvAdapter, Task
from .episode import TaskAgent, run_episode
from .memory import MemoryBank, count_tokens, dumps_jsonl, insert_entries, save_bank, trajectory_to_dict
from .retrieval import Embedder
from .writer import WriterPolicy, session_entries

log = logging.getLogger(__name__)


class EmptySeries(ValueError):
    pass


@dataclass
class StreamConfig:
    cadence_k: int = 10
    top_k_cap: int = 3
    token_budget: int = 1500
    refresh_every: int = 8
    refresh_last_k_actions: int = 3
    max_agent_steps: Optional[int] = None
    seed: int = 42
    shuffle_tasks: bool = False
    env_profile: str = "toy"
    turn_budget: int = DEFAULT_TURN_BUDGET
    obs_char_cap: int = 500

    def __post_init__(self):
        if self.cadence_k < 1:
            raise ValueError("cadence_k must be >= 1")
        if self.top_k_cap < 1 or self.token_budget < 0:
            raise ValueError("top_k_cap must be >= 1 and token_budget >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StreamMetrics:
    success_rate: float
    mean_final_score: float
    active_bank_tokens: int
    retired_bank_tokens: int
    auc: float
    active_entries: int = 0
    retired_entries: int = 0
    consolidation_events: int = 0
    success_series: list = field(default_factory=list)
    score_series: list = field(default_factory=list)
    active_tokens_series: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_auc(success_series: Sequence) -> float:
    """Mean over t of the running success rate after t tasks."""
    if len(success_series) == 0:
        raise EmptySeries("AUC of an empty series")
    running, total = 0, []
    for t, s in enumerate(success_series, start=1):
        running += int(bool(s))
        total.append(running / t)
    return math.fsum(total) / len(total)


def bootstrap_ci(values: Sequence[float], n_boot: int = 1000, alpha: float = 0.05, seed: int = 0,
                 statistic: Callable = np.mean) -> tuple[float, float]:
    """Percentile bootstrap interval for ``statistic`` over ``values``."""
    data = np.asarray(values, dtype=float)
    if data.size == 0:
        raise EmptySeries("bootstrap of an empty sample")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, data.size, size=(n_boot, data.size))
    stats = np.array([statistic(data[row]) for row in idx])
    lo, hi = np.quantile(stats, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


def summarize_per_task(records: Sequence[dict]) -> dict:
    """Stream metrics recomputed from per_task records alone."""
    if not records:
        raise EmptySeries("no per-task records")
    successes = [bool(r["success"]) for r in records]
    last = records[-1]
    return {
        "num_tasks": len(records),
        "success_rate": sum(successes) / len(records),
        "mean_final_score": math.fsum(r["final_score"] for r in records) / len(records),
        "auc": compute_auc(successes),
        "active_entries": last["active_entries"],
        "active_tokens": last["active_tokens"],
        "retired_entries": last["retired_entries"],
        "retired_tokens": last["retired_tokens"],
        "consolidation_events": sum(1 for r in records if r["consolidation_event"]),
    }


class CallCounter:
    """Wraps a policy and counts calls and prompt/completion tokens."""

    def __init__(self, policy: Callable):
        self.policy = policy
        self.calls = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.errors = 0

    def __call__(self, *args):
        self.calls += 1
        self.prompt_tokens += sum(count_tokens(_as_text(a)) for a in args)
        try:
            out = self.policy(*args)
        except Exception:
            self.errors += 1
            raise
        self.completion_tokens += count_tokens(out or "")
        return out

    def stats(self) -> dict:
        return {"calls": self.calls, "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens, "errors": self.errors}


def _as_text(arg) -> str:
    if isinstance(arg, str):
        return arg
    if isinstance(arg, list):
        return "\n".join(m.get("content", "") if isinstance(m, dict) else str(m) for m in arg)
    return str(arg)


class _LogSink:
    def __init__(self, out_dir: Optional[Path]):
        self.out_dir = out_dir
        self.handles = {}
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            for name in ("per_task", "trajectories", "dreamer_calls"):
                self.handles[name] = open(out_dir / f"{name}.jsonl", "w", encoding="utf-8")

    def write(self, stream: str, record: dict) -> None:
        fh = self.handles.get(stream)
        if fh is not None:
            fh.write(dumps_jsonl([record]))
            fh.flush()

    def close(self) -> None:
        for fh in self.handles.values():
            fh.close()


def run_online_stream(tasks: Sequence[Task], env: EnvAdapter, agent: TaskAgent,
                      writer_policy: WriterPolicy, consolidator_policy: Optional[ConsolidatorPolicy],
                      config: Optional[StreamConfig] = None, out_dir=None,
                      embedder: Optional[Embedder] = None, bank: Optional[MemoryBank] = None,
                      extra_config: Optional[dict] = None) -> tuple[MemoryBank, StreamMetrics]:
    """Run the stream. ``consolidator_policy=None`` is the writer-only setting.

    With ``out_dir`` set, per_task.jsonl, trajectories.jsonl,
    dreamer_calls.jsonl, bank.jsonl and summary.json are written there.
    """
    if not tasks:
        raise ValueError("task stream is empty")
    config = config or StreamConfig()
    tasks = list(tasks)
    if config.shuffle_tasks:
        random.Random(config.seed).shuffle(tasks)
    bank = bank if bank is not None else MemoryBank()
    writer = CallCounter(writer_policy)
    dreamer = CallCounter(consolidator_policy) if consolidator_policy is not None else None
    agent_stats = {"calls": 0, "prompt_tokens": 0}
    sink = _LogSink(Path(out_dir) if out_dir is not None else None)
    interval = IntervalLog()
    records: list[dict] = []
    started = time.perf_counter()
    try:
        for t, task in enumerate(tasks, start=1):
            if hasattr(env, "add_task") and task.task_id not in getattr(env, "tasks", {}):
                env.add_task(task)
            ep = run_episode(env, agent, task, bank, top_k_cap=config.top_k_cap,
                             token_budget=config.token_budget, refresh_every=config.refresh_every,
                             refresh_last_k_actions=config.refresh_last_k_actions,
                             max_agent_steps=config.max_agent_steps, embedder=embedder)
            agent_stats["calls"] += ep.agent_calls
            agent_stats["prompt_tokens"] += ep.agent_prompt_tokens
            traj = ep.trajectory(f"traj-{t:05d}", t)
            bank.log_trajectory(traj)
            sink.write("trajectories", trajectory_to_dict(traj))

            written, writer_error = [], None
            try:
                entries, _ = session_entries(bank, traj, writer, config.env_profile)
                insert_entries(bank, entries)
                written = [e.id for e in entries]
            except Exception as exc:  # writer transport or parse failure: skip this write
                log.warning("writer failed on %s: %s", task.task_id, exc)
                writer_error = f"{type(exc).__name__}: {exc}"
            interval.record(t, written, list(ep.retrieved_ids) + list(ep.refresh_ids))

            event = dreamer is not None and t % config.cadence_k == 0
            consolidated = False
            if event:
                consolidated = _consolidate(bank, interval, dreamer, config, t, embedder, sink)
                interval = IntervalLog()

            record = {
                "session_index": t,
                "task_id": task.task_id,
                "family": task.family,
                "success": ep.success,
                "final_score": ep.final_score,
                "steps": len(ep.steps),
                "retrieved_ids": ep.retrieved_ids,
                "retrieved_tokens": ep.retrieved_tokens,
                "refresh_ids": ep.refresh_ids,
                "written_ids": written,
                "consolidation_event": event,
                "consolidated": consolidated,
                "active_entries": len(bank.active()),
                "active_tokens": bank.active_tokens(),
                "retired_entries": len(bank.retired()),
                "retired_tokens": bank.retired_tokens(),
                "error": ep.error,
                "writer_error": writer_error,
            }
            records.append(record)
            sink.write("per_task", record)
    finally:
        sink.close()

    summary = summarize_per_task(records)
    metrics = StreamMetrics(
        success_rate=summary["success_rate"], mean_final_score=summary["mean_final_score"],
        active_bank_tokens=summary["active_tokens"], retired_bank_tokens=summary["retired_tokens"],
        auc=summary["auc"], active_entries=summary["active_entries"],
        retired_entries=summary["retired_entries"],
        consolidation_events=summary["consolidation_events"],
        success_series=[int(r["success"]) for r in records],
        score_series=[r["final_score"] for r in records],
        active_tokens_series=[r["active_tokens"] for r in records])
    if out_dir is not None:
        out = Path(out_dir)
        save_bank(bank, out / "bank.jsonl")
        summary["calls"] = {"agent": agent_stats, "writer": writer.stats(),
                            "dreamer": dreamer.stats() if dreamer else None}
        summary["config"] = {**config.to_dict(), **(extra_config or {})}
        summary["wall_clock"] = round(time.perf_counter() - started, 6)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    return bank, metrics


def _consolidate(bank: MemoryBank, interval: IntervalLog, policy, config: StreamConfig, t: int,
                 embedder, sink: _LogSink) -> bool:
    region = select_working_region(bank, interval)
    if len(region) == 0:
        sink.write("dreamer_calls", {"session_index": t, "skipped": "empty_region",
                                     "interval": interval.to_dict()})
        return False
    _, session = run_consolidation(bank, region, policy, turn_budget=config.turn_budget,
                                   session_index=t, embedder=embedder,
                                   obs_char_cap=config.obs_char_cap)
    record = session.to_log(t, session.applied)
    record.update({"skipped": None, "error": session.error,
                   "replacement_ids": session.replacement_ids, "interval": interval.to_dict()})
    sink.write("dreamer_calls", record)
    return session.applied


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
