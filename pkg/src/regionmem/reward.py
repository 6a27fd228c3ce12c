"""Rewards for consolidation rollouts.

utility     mean return of the eval tasks against a local bank holding only
            the replacement entries
r_cf        utility(S) minus the mean utility over masked variants of S
composite   utility + alpha * r_cf - w_fmt * format penalty
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .env.base import Task
from .env.scripted import ScriptedTaskAgent
from .env.toy import ToyEnv, ToyWorld
from .episode import run_episode
from .memory import MemoryBank, MemoryEntry

AgentRunner = Callable[[Task, MemoryBank], float]

# enumerate every mask at or below this many distinct masks
EXACT_MASK_LIMIT = 64
# above this, masks are drawn by rejection instead of indexing the full list
_INDEXABLE_LIMIT = 200_000


class GroupTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.5
    rho: float = 0.5
    mc_samples_fraction: float = 0.25
    mc_min_samples: int = 1
    format_penalty_weight: float = 0.5
    mask_seed: int = 0
    use_format_penalty: bool = True
    binary_return: bool = False
    exact_mask_limit: int = EXACT_MASK_LIMIT

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must be in (0, 1), got {self.rho}")
        if self.mc_min_samples < 1:
            raise ValueError("mc_min_samples must be >= 1")
        if self.mc_samples_fraction < 0:
            raise ValueError("mc_samples_fraction must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RewardReport:
    utility: float
    cf_estimate: float
    cf_exact: Optional[float]
    composite: float
    mask_utilities: list = field(default_factory=list)   # (masked ids, utility)
    format_penalty: float = 0.0
    num_mc_samples: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask_utilities"] = [[list(ids), u] for ids, u in self.mask_utilities]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RewardReport":
        return cls(d["utility"], d["cf_estimate"], d.get("cf_exact"), d["composite"],
                   [(tuple(ids), u) for ids, u in d.get("mask_utilities", [])],
                   d.get("format_penalty", 0.0), d.get("num_mc_samples", 0))


def mean(values: Sequence[float]) -> float:
    """Order-independent mean (exactly rounded sum)."""
    return math.fsum(values) / len(values)


class UtilityCache:
    """Utility keyed by the set of remaining entries (content included, since
    sibling rollouts can reuse ids), so identical variants are evaluated once."""

    def __init__(self, eval_tasks: Sequence[Task], agent_runner: AgentRunner):
        if not eval_tasks:
            raise ValueError("eval_tasks must be non-empty")
        self.eval_tasks = list(eval_tasks)
        self.agent_runner = agent_runner
        self.values: dict = {}

    def __call__(self, entries: Sequence[MemoryEntry]) -> float:
        key = frozenset(entries)
        if key not in self.values:
            self.values[key] = utility(entries, self.eval_tasks, self.agent_runner)
        return self.values[key]


def utility(replacement: Sequence[MemoryEntry], eval_tasks: Sequence[Task],
            agent_runner: AgentRunner) -> float:
    if not eval_tasks:
        raise ValueError("eval_tasks must be non-empty")
    bank = MemoryBank.local(replacement)
    return mean([float(agent_runner(task, bank)) for task in eval_tasks])


def mask_size(n: int, rho: float) -> int:
    """max(1, round(rho * n)) with halves rounded up."""
    return max(1, min(n, math.floor(rho * n + 0.5)))


def num_mc_samples(num_masks: int, config: RewardConfig) -> int:
    m = max(config.mc_min_samples, math.ceil(config.mc_samples_fraction * num_masks))
    return min(m, num_masks)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def sample_masks(n: int, m: int, count: int, seed: int) -> list[tuple[int, ...]]:
    """``count`` distinct size-``m`` index subsets of range(n), uniformly
    without replacement, reproducible from ``seed``."""
    total = math.comb(n, m)
    if count > total:
        raise ValueError(f"cannot draw {count} distinct masks out of {total}")
    rng = _rng(seed, n, m)
    if total <= _INDEXABLE_LIMIT:
        every = list(itertools.combinations(range(n), m))
        picks = rng.choice(total, size=count, replace=False)
        return [every[int(i)] for i in picks]
    seen: dict = {}
    while len(seen) < count:
        mask = tuple(sorted(int(i) for i in rng.choice(n, size=m, replace=False)))
        seen.setdefault(mask, None)
    return list(seen)


def counterfactual_reward(replacement: Sequence[MemoryEntry], eval_tasks: Sequence[Task],
                          agent_runner: AgentRunner, config: RewardConfig = RewardConfig(), *,
                          num_samples: Optional[int] = None, exact: Optional[bool] = None,
                          cache: Optional[UtilityCache] = None,
                          max_workers: int = 1) -> tuple[float, dict]:
    """r_cf = U(S) - mean U(S minus mask) over the masks.

    Exact enumeration is used when the number of distinct masks is at most
    ``config.exact_mask_limit`` or the sample count reaches it. Pass
    ``exact=False`` with ``num_samples`` to force the Monte Carlo path.
    """
    cache = cache or UtilityCache(eval_tasks, agent_runner)
    replacement = list(replacement)
    n = len(replacement)
    if n == 0:
        u = cache([])
        return 0.0, {"utility": u, "masks": [], "exact": True, "num_samples": 0, "mask_size": 0,
                     "num_masks": 0}
    m = mask_size(n, config.rho)
    total = math.comb(n, m)
    samples = num_samples if num_samples is not None else num_mc_samples(total, config)
    samples = min(samples, total)
    if exact is None:
        exact = total <= config.exact_mask_limit or samples >= total
    if exact:
        masks = list(itertools.combinations(range(n), m))
    else:
        masks = sample_masks(n, m, samples, config.mask_seed)

    def variant(mask):
        drop = set(mask)
        return [e for i, e in enumerate(replacement) if i not in drop]

    u_full = cache(replacement)
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            values = list(pool.map(lambda mk: cache(variant(mk)), masks))
    else:
        values = [cache(variant(mk)) for mk in masks]
    mask_utils = [(tuple(replacement[i].id for i in mk), u) for mk, u in zip(masks, values)]
    estimate = u_full - mean(values)
    return estimate, {"utility": u_full, "masks": mask_utils, "exact": exact,
                      "num_samples": len(masks), "mask_size": m, "num_masks": total}


def exact_counterfactual(replacement, eval_tasks, agent_runner, config: RewardConfig = RewardConfig(),
                         cache: Optional[UtilityCache] = None) -> float:
    return counterfactual_reward(replacement, eval_tasks, agent_runner, config, exact=True,
                                 cache=cache)[0]


def format_penalty(session_or_turns) -> float:
    """Fraction of turns whose call was malformed or rejected."""
    turns = getattr(session_or_turns, "transcript", session_or_turns)
    turns = list(turns or [])
    if not turns:
        return 0.0
    bad = sum(1 for t in turns if not (t.ok if hasattr(t, "ok") else t["ok"]))
    return bad / len(turns)


def composite_reward(utility_value: float, cf_estimate: float, fmt: float,
                     config: RewardConfig = RewardConfig()) -> float:
    w = config.format_penalty_weight if config.use_format_penalty else 0.0
    return utility_value + config.alpha * cf_estimate - w * fmt


def grpo_advantages(rewards: Sequence[float], eps: float = 1e-8) -> list[float]:
    """(r - mean) / (population std + eps). Constant groups give zeros."""
    r = [float(x) for x in rewards]
    if len(r) < 2:
        raise GroupTooSmall(f"group size must be >= 2, got {len(r)}")
    if all(x == r[0] for x in r):
        return [0.0] * len(r)
    mu = mean(r)
    centered = [x - mu for x in r]
    std = math.sqrt(mean([c * c for c in centered]))
    return [c / (std + eps) for c in centered]


def evaluate_replacement(replacement: Sequence[MemoryEntry], eval_tasks: Sequence[Task],
                         agent_runner: AgentRunner, config: RewardConfig = RewardConfig(), *,
                         session=None, num_samples: Optional[int] = None,
                         max_workers: int = 1) -> RewardReport:
    """Full reward report for one replacement set."""
    cache = UtilityCache(eval_tasks, agent_runner)
    cf, diag = counterfactual_reward(replacement, eval_tasks, agent_runner, config,
                                     num_samples=num_samples, cache=cache, max_workers=max_workers)
    fmt = format_penalty(session) if session is not None else 0.0
    u = diag["utility"]
    return RewardReport(
        utility=u, cf_estimate=cf, cf_exact=cf if diag["exact"] else None,
        composite=composite_reward(u, cf, fmt, config), mask_utilities=diag["masks"],
        format_penalty=fmt, num_mc_samples=0 if diag["exact"] else diag["num_samples"])


class ToyRunner:
    """Agent runner for the toy world: a fresh env and scripted agent per
    episode, so calls are independent and thread-safe."""

    def __init__(self, world=None, *, top_k_cap: int = 3, token_budget: int = 1500,
                 refresh_every: int = 8, binary: bool = False, embedder=None):
        self.world = world or ToyWorld.default()
        self.top_k_cap = top_k_cap
        self.token_budget = token_budget
        self.refresh_every = refresh_every
        self.binary = binary
        self.embedder = embedder
        self.min_score = -1.0

    def __call__(self, task: Task, bank: MemoryBank) -> float:
        env = ToyEnv(self.world, [task])
        result = run_episode(env, ScriptedTaskAgent(self.world.rooms), task, bank,
                             top_k_cap=self.top_k_cap, token_budget=self.token_budget,
                             refresh_every=self.refresh_every, embedder=self.embedder)
        if self.binary:
            return 1.0 if result.success else 0.0
        return result.final_score
