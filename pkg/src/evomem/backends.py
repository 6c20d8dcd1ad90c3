"""Model backends: deterministic scripted doubles and a chat-completions client."""

from __future__ import annotations

import enum
import json
import logging
import os
import socket
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

from .errors import BackendError, ConfigError, InvalidInput

logger = logging.getLogger(__name__)

UNMATCHED = "UNMATCHED"
API_KEY_ENV = "EVOMEM_API_KEY"


class BackendKind(str, enum.Enum):
    SCRIPTED = "scripted"
    HTTP = "http"


class ModelBackend(Protocol):
    kind: BackendKind
    identifier: str

    def complete(self, prompt: str) -> str: ...


class MatchKind(str, enum.Enum):
    EXACT = "exact"
    CONTAINS = "contains"
    ALWAYS = "always"


@dataclass
class ScriptedRule:
    match: MatchKind
    text: str = ""
    responses: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.match = MatchKind(self.match)
        if not self.responses:
            raise InvalidInput("a scripted rule needs at least one response")

    def matches(self, prompt: str) -> bool:
        if self.match is MatchKind.ALWAYS:
            return True
        if self.match is MatchKind.EXACT:
            return prompt == self.text
        return self.text in prompt

    @classmethod
    def from_dict(cls, d: dict) -> ScriptedRule:
        match = d.get("match")
        if not isinstance(match, dict) or len(match) != 1:
            raise ConfigError(f"rule match must be a single-key object, got {match!r}")
        ((kind, value),) = match.items()
        try:
            kind = MatchKind(kind)
        except ValueError:
            raise ConfigError(f"unknown match kind {kind!r}") from None
        text = "" if kind is MatchKind.ALWAYS else str(value)
        return cls(kind, text, [str(r) for r in d.get("responses", [])])


class ScriptedBackend:
    """First matching rule wins; each rule cycles through its responses."""

    kind = BackendKind.SCRIPTED

    def __init__(self, rules: list[ScriptedRule], identifier: str = "scripted"):
        self.rules = list(rules)
        self.identifier = identifier
        self._counters = [0] * len(self.rules)
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, identifier: str = "scripted") -> ScriptedBackend:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            rules = [ScriptedRule.from_dict(r) for r in data["rules"]]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"cannot load scripted rules from {path}: {exc}") from exc
        return cls(rules, identifier)

    def complete(self, prompt: str) -> str:
        if not prompt:
            raise InvalidInput("prompt must be non-empty")
        with self._lock:
            for i, rule in enumerate(self.rules):
                if rule.matches(prompt):
                    reply = rule.responses[self._counters[i] % len(rule.responses)]
                    self._counters[i] += 1
                    return reply
        return UNMATCHED

    def state_dict(self) -> dict:
        with self._lock:
            return {"counters": list(self._counters)}

    def load_state_dict(self, state: dict) -> None:
        counters = list(state["counters"])
        if len(counters) != len(self.rules):
            raise ConfigError("backend state does not match the rule set")
        with self._lock:
            self._counters = counters


class CallableBackend:
    """Wraps a pure ``prompt -> text`` function, e.g. a hand-written scripted policy."""

    kind = BackendKind.SCRIPTED

    def __init__(self, fn: Callable[[str], str], identifier: str = "callable"):
        self.fn = fn
        self.identifier = identifier

    def complete(self, prompt: str) -> str:
        if not prompt:
            raise InvalidInput("prompt must be non-empty")
        return self.fn(prompt)


class _Retryable(Exception):
    pass


class HttpBackend:
    """Chat-completions style client.

    Timeouts and 5xx responses are retried with exponential backoff
    (``backoff_base * backoff_factor**attempt``); 4xx responses fail at once.
    """

    kind = BackendKind.HTTP

    def __init__(
        self,
        endpoint: str,
        identifier: str,
        timeout: float = 60.0,
        max_retries: int = 3,
        temperature: float = 0.0,
        api_key: str | None = None,
        backoff_base: float = 0.5,
        backoff_factor: float = 2.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.identifier = identifier
        self.timeout = timeout
        self.max_retries = max_retries
        self.temperature = temperature
        self._api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self._sleep = sleep

    def __repr__(self):
        return f"HttpBackend(endpoint={self.endpoint!r}, identifier={self.identifier!r})"

    def _request(self, prompt: str) -> bytes:
        body = json.dumps(
            {
                "model": self.identifier,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": self.temperature,
            }
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read()
        except urllib.error.HTTPError as exc:
            if exc.code >= 500:
                raise _Retryable(f"HTTP {exc.code}") from None
            raise BackendError(f"HTTP {exc.code} from backend (not retried)") from None
        except (socket.timeout, TimeoutError) as exc:
            raise _Retryable(f"timeout: {exc}") from None
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                raise _Retryable(f"timeout: {exc.reason}") from None
            raise BackendError(f"backend unreachable: {exc.reason}") from None

    def complete(self, prompt: str) -> str:
        if not prompt:
            raise InvalidInput("prompt must be non-empty")
        attempt = 0
        while True:
            try:
                raw = self._request(prompt)
                break
            except _Retryable as exc:
                if attempt >= self.max_retries:
                    raise BackendError(f"retries exhausted after {attempt + 1} attempts: {exc}") from None
                delay = self.backoff_base * self.backoff_factor**attempt
                attempt += 1
                logger.warning("backend %s: %s; retry %d/%d in %.2fs", self.identifier, exc, attempt, self.max_retries, delay)
                self._sleep(delay)
        try:
            payload = json.loads(raw.decode("utf-8"))
            content = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed backend response: {exc!r}") from None
        if not isinstance(content, str):
            raise BackendError("malformed backend response: content is not text")
        return content
