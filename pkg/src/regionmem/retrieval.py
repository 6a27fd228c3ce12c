"""Read operator: cosine top-k under a token budget, plus the memory panel
that is injected into the task agent's context."""
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional, Protocol, Sequence

import httpx
import numpy as np

from .memory import SEMANTIC, MemoryBank, MemoryEntry, render_entry

log = logging.getLogger(__name__)

PANEL_HEADER = "=== Memory from past experience ==="
PANEL_FOOTER = "=== End Memory ==="
REFRESH_SEP = " || "
ACTION_SEP = " | "

_WORD = re.compile(r"[a-z0-9]+")


class EmbedderUnavailable(RuntimeError):
    pass


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


def _normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        out = np.zeros_like(vec)
        out[0] = 1.0
        return out
    return vec / norm


class HashingEmbedder:
    """Hashed unigram + bigram counts, L2-normalized.

    Stable across processes (blake2b, not ``hash``). Empty or token-free text
    maps to the first basis vector.
    """

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._cached = lru_cache(maxsize=65536)(self._embed)

    def _bucket(self, feature: str) -> int:
        digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def _embed(self, text: str) -> np.ndarray:
        words = _WORD.findall(text.lower())
        vec = np.zeros(self.dim, dtype=np.float64)
        for w in words:
            vec[self._bucket(w)] += 1.0
        for a, b in zip(words, words[1:]):
            vec[self._bucket(a + " " + b)] += 1.0
        out = _normalize(vec)
        out.setflags(write=False)
        return out

    def embed(self, text: str) -> np.ndarray:
        return self._cached(text)


class HttpEmbedder:
    """Embeddings from an OpenAI-style ``/v1/embeddings`` endpoint."""

    def __init__(self, base_url: str, model: str, dim: Optional[int] = None,
                 api_key: Optional[str] = None, timeout: float = 30.0,
                 client: Optional[httpx.Client] = None):
        self.url = base_url.rstrip("/") + "/embeddings"
        self.model = model
        self.dim = dim
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout)
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        if text in self._cache:
            return self._cache[text]
        try:
            resp = self._client.post(self.url, json={"model": self.model, "input": [text]},
                                     headers=self._headers)
            resp.raise_for_status()
            values = resp.json()["data"][0]["embedding"]
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise EmbedderUnavailable(str(exc)) from exc
        vec = _normalize(np.asarray(values, dtype=np.float64))
        if self.dim is None:
            self.dim = len(vec)
        elif len(vec) != self.dim:
            raise EmbedderUnavailable(f"expected dim {self.dim}, got {len(vec)}")
        self._cache[text] = vec
        return vec


_default_embedder = HashingEmbedder()


def default_embedder() -> HashingEmbedder:
    return _default_embedder


def embed(text: str, embedder: Optional[Embedder] = None) -> np.ndarray:
    return (embedder or _default_embedder).embed(text)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    # inputs are unit-norm
    return float(np.dot(u, v))


@dataclass
class RetrievalResult:
    ranked: list[tuple[str, float]] = field(default_factory=list)
    total_tokens: int = 0

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.ranked]


def score_entries(query: str, entries: Iterable[MemoryEntry],
                  embedder: Optional[Embedder] = None) -> list[tuple[str, float]]:
    """(id, cosine) for every entry, sorted by score desc then id asc."""
    q = embed(query, embedder)
    scored = [(e.id, cosine(q, embed(render_entry(e), embedder))) for e in entries]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored


def read(query: str, bank: MemoryBank, top_k_cap: int = 3, token_budget: int = 1500,
         embedder: Optional[Embedder] = None) -> RetrievalResult:
    """Longest ranked prefix of active entries whose tokens fit the budget,
    then truncated to ``top_k_cap`` entries."""
    if top_k_cap < 0 or token_budget < 0:
        raise ValueError("top_k_cap and token_budget must be non-negative")
    active = bank.active()
    if not active:
        return RetrievalResult()
    scored = score_entries(query, active, embedder)
    prefix, used = [], 0
    for entry_id, score in scored:
        cost = bank[entry_id].token_count
        if used + cost > token_budget:
            break
        prefix.append((entry_id, score))
        used += cost
    prefix = prefix[:top_k_cap]
    return RetrievalResult(prefix, sum(bank[i].token_count for i, _ in prefix))


def refresh_query(instruction: str, recent_actions: Sequence[str], observation: str,
                  last_k: Optional[int] = None) -> str:
    actions = list(recent_actions)
    if last_k is not None:
        actions = actions[-last_k:] if last_k > 0 else []
    parts = [instruction]
    if actions:
        parts.append(ACTION_SEP.join(actions))
    parts.append(observation)
    return REFRESH_SEP.join(parts)


def render_insert_block(entry) -> str:
    """One entry in the writer's INSERT_* grammar."""
    if entry.kind == SEMANTIC:
        return "\n".join([
            "INSERT_SEMANTIC",
            f"name: {entry.name}",
            f"summary: {entry.summary}",
            f"details: {entry.details}",
            "END",
        ])
    return "\n".join([
        "INSERT_PROCEDURAL",
        f"name: {entry.name}",
        f"type: {entry.proc_type}",
        f"summary: {entry.summary}",
        "steps: " + json.dumps(list(entry.steps), ensure_ascii=False),
        "END",
    ])


def render_memory_panel(entries: Sequence) -> str:
    if not entries:
        return ""
    body = "\n\n".join(render_insert_block(e) for e in entries)
    return f"{PANEL_HEADER}\n{body}\n{PANEL_FOOTER}"
