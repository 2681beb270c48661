"""Chat-completion clients: an HTTP endpoint client and the offline rule client."""

from __future__ import annotations

import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Protocol, Sequence

API_KEY_ENV = "EDRK_LLM_API_KEY"


class TransportError(RuntimeError):
    """The endpoint could not be reached or returned an unusable response."""


class ChatClient(Protocol):
    offline: bool

    def complete(self, messages: Sequence[dict]) -> str: ...


@dataclass
class EndpointSettings:
    url: str
    model: str
    timeout: float = 60.0
    retries: int = 2
    backoff: float = 1.0


class HttpChatClient:
    """Minimal chat-completion client: POST ``{model, messages, temperature: 0}``."""

    offline = False

    def __init__(self, settings: EndpointSettings, api_key: str | None = None, transport=None):
        import httpx

        self.settings = settings
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._client = httpx.Client(timeout=settings.timeout, headers=headers, transport=transport)
        self._httpx = httpx

    def complete(self, messages: Sequence[dict]) -> str:
        body = {"model": self.settings.model, "messages": list(messages), "temperature": 0}
        last_error: Exception | None = None
        for attempt in range(self.settings.retries + 1):
            try:
                resp = self._client.post(self.settings.url, json=body)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except (self._httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last_error = exc
                if attempt < self.settings.retries:
                    time.sleep(self.settings.backoff * (2**attempt))
        raise TransportError(f"chat completion failed after {self.settings.retries + 1} attempts") from last_error

    def close(self):
        self._client.close()


_TASK_RE = re.compile(r"^Task: *(.+)$", re.MULTILINE)
_TEXT_RE = re.compile(r"^Text: ?(.*)$", re.MULTILINE)


class OfflineClient:
    """Answers classification prompts with the keyword rules; makes no network calls.

    The task name and the query text are read back from the prompt, so this
    client exercises the same prompt/parse path as a real endpoint.
    """

    offline = True

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[dict]) -> str:
        from .extract import rule_fallback_classify

        with self._lock:
            self.calls += 1
        prompt = messages[-1]["content"]
        task = _TASK_RE.search(prompt)
        texts = _TEXT_RE.findall(prompt)
        if task is None or not texts:
            return ""
        return rule_fallback_classify(task.group(1).strip(), texts[-1])
