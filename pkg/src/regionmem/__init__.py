"""Typed agent memory with a fast append-only writer and an offline
consolidator that rewrites bounded regions of the bank."""
from .consolidation import (ConsolidationSession, IntervalLog, WorkingRegion, run_consolidation,
                            select_working_region)
from .deployment import StreamConfig, StreamMetrics, compute_auc, run_online_stream
from .memory import (EntryDraft, MemoryBank, MemoryEntry, TrajectoryRecord, apply_region_rewrite,
                     insert_entries, load_bank, save_bank)
from .retrieval import read, refresh_query, render_memory_panel
from .reward import (RewardConfig, RewardReport, composite_reward, counterfactual_reward,
                     format_penalty, grpo_advantages, utility)
from .training import TrainingConfig, TrainingStepRecord, run_training_step
from .writer import parse_writer_output, write_session

__version__ = "0.1.0"

__all__ = [
    "ConsolidationSession", "IntervalLog", "WorkingRegion", "run_consolidation", "select_working_region",
    "StreamConfig", "StreamMetrics", "compute_auc", "run_online_stream",
    "EntryDraft", "MemoryBank", "MemoryEntry", "TrajectoryRecord", "apply_region_rewrite",
    "insert_entries", "load_bank", "save_bank",
    "read", "refresh_query", "render_memory_panel",
    "RewardConfig", "RewardReport", "composite_reward", "counterfactual_reward", "format_penalty",
    "grpo_advantages", "utility",
    "TrainingConfig", "TrainingStepRecord", "run_training_step",
    "parse_writer_output", "write_session",
]
