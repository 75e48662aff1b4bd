"""Model clients for the synthesis pipeline.

``ScriptedClient`` is a deterministic table-driven mock. ``ChatCompletionClient``
talks to a chat-completion style HTTPS endpoint with a bearer token read from
the environment.
"""

from __future__ import annotations

import logging
import os
import time
from collections import defaultdict
from typing import Any, Callable, Mapping, Protocol

import httpx

log = logging.getLogger(__name__)


class ClientError(RuntimeError):
    pass


class ClientTimeout(ClientError):
    pass


class ModelClient(Protocol):
    single_flight: bool

    def submit(self, prompt: str, context: Mapping[str, Any]) -> str: ...


Entry = str | Exception | Callable[[Mapping[str, Any]], Any] | list


class ScriptedClient:
    """Answers from a script keyed by pipeline stage.

    A script entry may be a string, an exception instance (raised), a callable
    taking the request context, or a list consumed in order per
    (stage, question id). Lists repeat their last element once exhausted.
    """

    single_flight = True

    def __init__(self, script: Mapping[str, Entry]):
        self.script = dict(script)
        self._cursor: dict[tuple[str, str], int] = defaultdict(int)
        self.calls: list[tuple[str, str]] = []

    def submit(self, prompt: str, context: Mapping[str, Any]) -> str:
        stage = context["stage"]
        qid = context.get("question_id", "")
        self.calls.append((stage, qid))
        if stage not in self.script:
            raise ClientError(f"mock has no script for stage {stage!r}")
        entry = self.script[stage]
        if isinstance(entry, list):
            k = self._cursor[(stage, qid)]
            self._cursor[(stage, qid)] = k + 1
            entry = entry[min(k, len(entry) - 1)]
        if callable(entry) and not isinstance(entry, Exception):
            entry = entry(context)
        if isinstance(entry, Exception):
            raise entry
        return str(entry)


class ChatCompletionClient:
    """One POST per request: {model, messages, temperature} -> completion text."""

    single_flight = False

    def __init__(
        self,
        endpoint: str,
        model: str,
        temperature: float = 0.0,
        token_env: str = "TIRLAB_API_TOKEN",
        timeout: float = 30.0,
        retries: int = 2,
        backoff: float = 1.0,
        transport: httpx.BaseTransport | None = None,
    ):
        if not endpoint:
            raise ClientError("remote client needs an endpoint URL")
        token = os.environ.get(token_env, "").strip()
        if not token:
            raise ClientError(f"missing bearer token: set {token_env}")
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.retries = retries
        self.backoff = backoff
        self._http = httpx.Client(
            timeout=timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {token}"},
        )

    def _messages(self, prompt: str, context: Mapping[str, Any]) -> list[dict[str, str]]:
        messages = []
        if context.get("system"):
            messages.append({"role": "system", "content": context["system"]})
        messages.extend(context.get("history", []))
        messages.append({"role": "user", "content": prompt})
        return messages

    def submit(self, prompt: str, context: Mapping[str, Any]) -> str:
        body = {
            "model": self.model,
            "messages": self._messages(prompt, context),
            "temperature": self.temperature,
        }
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._http.post(self.endpoint, json=body)
                resp.raise_for_status()
                return _completion_text(resp.json())
            except httpx.TimeoutException as err:
                last = ClientTimeout(str(err))
            except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as err:
                last = ClientError(f"{type(err).__name__}: {err}")
            log.warning("request %d/%d to %s failed: %s", attempt + 1, self.retries + 1, self.endpoint, last)
            if attempt < self.retries and self.backoff:
                time.sleep(self.backoff * (attempt + 1))
        assert last is not None
        raise last

    def close(self) -> None:
        self._http.close()


def _completion_text(payload: Mapping[str, Any]) -> str:
    if "choices" in payload:
        choice = payload["choices"][0]
        if "message" in choice:
            return str(choice["message"]["content"])
        return str(choice["text"])
    return str(payload["completion"])
