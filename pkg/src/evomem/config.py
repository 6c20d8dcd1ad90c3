"""Run configuration: dataclasses, strict JSON loading, dotted-path overrides."""

from __future__ import annotations

import dataclasses
import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .agent import AgentConfig
from .backends import API_KEY_ENV, HttpBackend, ModelBackend, ScriptedBackend
from .errors import ConfigError, EvoMemError
from .memory import Policy
from .retrieval import Embedder, RetrievalConfig, make_embedder


class Ordering(str, enum.Enum):
    GIVEN = "given"
    EASY_TO_HARD = "easy_to_hard"
    HARD_TO_EASY = "hard_to_easy"
    SHUFFLED = "shuffled"


@dataclass(frozen=True)
class EmbedderConfig:
    name: str = "hash"
    dimension: int = 256
    endpoint: str | None = None


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "scripted"
    identifier: str = "scripted"
    endpoint: str | None = None
    timeout: float = 60.0
    max_retries: int = 3
    temperature: float = 0.0
    rules_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("scripted", "http"):
            raise ConfigError(f"backend.kind must be 'scripted' or 'http', got {self.kind!r}")
        if self.max_retries < 0:
            raise ConfigError("backend.max_retries must be >= 0")


@dataclass(frozen=True)
class StreamSpec:
    run_id: str
    tasks_path: str
    ordering: str = Ordering.GIVEN.value
    shuffle_seed: int | None = None
    policy: str = Policy.EXPRAG.value
    capacity: int | None = None
    ingest_failures: bool = False
    history_window: int = 5
    checkpoint_every: int = 10
    step_cap: int = 30
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)

    def __post_init__(self):
        if not self.run_id or "/" in self.run_id:
            raise ConfigError(f"invalid run_id {self.run_id!r}")
        ordering = self.ordering
        if isinstance(ordering, str) and ordering.startswith("shuffled:"):
            ordering, seed = ordering.split(":", 1)
            object.__setattr__(self, "shuffle_seed", int(seed))
        try:
            object.__setattr__(self, "ordering", Ordering(ordering).value)
            object.__setattr__(self, "policy", Policy(self.policy).value)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.ordering == Ordering.SHUFFLED.value and self.shuffle_seed is None:
            raise ConfigError("shuffled ordering requires shuffle_seed")
        if self.checkpoint_every < 1 or self.history_window < 1 or self.step_cap < 1:
            raise ConfigError("checkpoint_every, history_window and step_cap must be >= 1")
        if self.capacity is not None and self.capacity < 1:
            raise ConfigError("capacity must be a positive integer")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class CliConfig:
    stream: StreamSpec
    output_dir: str = "runs"
    log_level: str = "INFO"

    def to_dict(self) -> dict:
        return {**self.stream.to_dict(), "output_dir": self.output_dir, "log_level": self.log_level}


_NESTED = {"retrieval": RetrievalConfig, "embedder": EmbedderConfig, "agent": AgentConfig, "backend": BackendConfig}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k in _NESTED and cls is StreamSpec:
            v = _build(_NESTED[k], v, f"{k}.")
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except EvoMemError as exc:
        raise ConfigError(str(exc)) from None
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip(), value


def apply_overrides(data: dict, overrides: list[tuple[str, Any]]) -> dict:
    data = json.loads(json.dumps(data))
    for key, value in overrides:
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key!r}: {p!r} is not a section")
        node[parts[-1]] = value
    return data


def config_from_dict(data: dict, base_dir: str | Path | None = None) -> CliConfig:
    data = dict(data)
    output_dir = data.pop("output_dir", "runs")
    log_level = data.pop("log_level", "INFO")
    if base_dir is not None:
        base = Path(base_dir)
        if "tasks_path" in data:
            data["tasks_path"] = str(base / data["tasks_path"])
        rules = data.get("backend", {}).get("rules_path") if isinstance(data.get("backend"), dict) else None
        if rules:
            data["backend"] = {**data["backend"], "rules_path": str(base / rules)}
    if "run_id" not in data or "tasks_path" not in data:
        raise ConfigError("config needs run_id and tasks_path")
    return CliConfig(_build(StreamSpec, data, ""), str(output_dir), str(log_level))


def load_config(path: str | Path, overrides: list[tuple[str, Any]] = ()) -> CliConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(apply_overrides(data, list(overrides)), base_dir=path.parent)


def spec_from_dict(data: dict) -> StreamSpec:
    return _build(StreamSpec, data, "")


def make_backend(cfg: BackendConfig) -> ModelBackend:
    if cfg.kind == "scripted":
        if not cfg.rules_path:
            raise ConfigError("scripted backend needs backend.rules_path")
        return ScriptedBackend.from_file(cfg.rules_path, cfg.identifier)
    if not cfg.endpoint:
        raise ConfigError("http backend needs backend.endpoint")
    return HttpBackend(
        cfg.endpoint,
        cfg.identifier,
        timeout=cfg.timeout,
        max_retries=cfg.max_retries,
        temperature=cfg.temperature,
        api_key=os.environ.get(API_KEY_ENV),
    )


def make_spec_embedder(cfg: EmbedderConfig) -> Embedder:
    try:
        return make_embedder(cfg.name, cfg.dimension, cfg.endpoint)
    except EvoMemError as exc:
        raise ConfigError(str(exc)) from None
