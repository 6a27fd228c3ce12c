"""OpenAI-compatible chat client and the HTTP-backed writer, consolidator and
task-agent policies."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional

import httpx

from .writer import load_prompt

log = logging.getLogger(__name__)

RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


class ChatError(RuntimeError):
    pass


@dataclass
class ChatConfig:
    base_url: str = "http://localhost:8000"
    model: str = "default"
    api_key: Optional[str] = None
    temperature: float = 0.7
    top_p: float = 0.9
    max_tokens: Optional[int] = None
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 0.5


class ChatClient:
    """POST {base_url}/v1/chat/completions with retries on transport errors
    and retryable status codes (exponential backoff)."""

    def __init__(self, config: ChatConfig, client: Optional[httpx.Client] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        base = config.base_url.rstrip("/")
        self.url = base + ("/chat/completions" if base.endswith("/v1") else "/v1/chat/completions")
        self._client = client or httpx.Client(timeout=config.timeout)
        self._sleep = sleep
        self.calls = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0

    def payload(self, messages: list[dict]) -> dict:
        body = {"model": self.config.model, "messages": messages,
                "temperature": self.config.temperature, "top_p": self.config.top_p}
        if self.config.max_tokens is not None:
            body["max_tokens"] = self.config.max_tokens
        return body

    def complete(self, messages: list[dict]) -> str:
        headers = {"Authorization": f"Bearer {self.config.api_key}"} if self.config.api_key else {}
        body = self.payload(messages)
        last: Optional[Exception] = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(self.config.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.url, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = exc
                log.warning("chat request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code in RETRY_STATUS:
                last = ChatError(f"HTTP {resp.status_code}")
                log.warning("chat request got HTTP %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise ChatError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                data = resp.json()
                content = data["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ChatError(f"malformed completion response: {exc}") from exc
            self.calls += 1
            usage = data.get("usage") or {}
            self.prompt_tokens += int(usage.get("prompt_tokens", 0))
            self.completion_tokens += int(usage.get("completion_tokens", 0))
            return content or ""
        raise ChatError(f"gave up after {self.config.max_retries + 1} attempts: {last}")


class HttpWriterPolicy:
    def __init__(self, client: ChatClient):
        self.client = client

    def __call__(self, prompt: str) -> str:
        return self.client.complete([{"role": "user", "content": prompt}])


class HttpConsolidatorPolicy:
    def __init__(self, client: ChatClient):
        self.client = client

    def __call__(self, system_prompt: str, messages: list) -> str:
        return self.client.complete([{"role": "system", "content": system_prompt}, *messages])


class HttpTaskAgent:
    """Chat-model task agent. The memory panel rides in the system message;
    the episode so far is replayed as alternating turns."""

    def __init__(self, client: ChatClient, prompt_name: str = "agent_toy"):
        self.client = client
        self.system = load_prompt(prompt_name)
        self.history: list[dict] = []

    def reset(self, instruction: str) -> None:
        self.history = []

    def act(self, observation: str, memory: str = "") -> str:
        system = self.system if not memory else f"{self.system}\n\n{memory}"
        self.history.append({"role": "user", "content": observation})
        reply = self.client.complete([{"role": "system", "content": system}, *self.history])
        action = next((ln.strip() for ln in reply.splitlines() if ln.strip()), "look around")
        self.history.append({"role": "assistant", "content": action})
        return action
