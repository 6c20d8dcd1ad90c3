"""Experience memory: entries, evolve policies, and the JSONL snapshot format."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidEmbedding, InvalidInput, SnapshotError

UNIT_TOL = 1e-6
SNAPSHOT_FORMAT = "evomem.memory"
SNAPSHOT_VERSION = 1


class Outcome(str, enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    UNGRADED = "ungraded"


class Policy(str, enum.Enum):
    BASELINE = "baseline"
    HISTORY = "history"
    EXP_RECENT = "exp_recent"
    EXPRAG = "exprag"
    REMEM = "remem"

    @property
    def evicts_by_utility(self) -> bool:
        return self in (Policy.EXPRAG, Policy.REMEM)


@dataclass(frozen=True)
class Feedback:
    """Graded outcome of one task. ``progress`` is meaningless when ungraded."""

    outcome: Outcome
    progress: float = 0.0
    detail: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "outcome", Outcome(self.outcome))
        if not 0.0 <= self.progress <= 1.0:
            raise InvalidInput(f"progress must be in [0, 1], got {self.progress}")
        if self.outcome is Outcome.SUCCESS and self.progress != 1.0:
            raise InvalidInput("a successful outcome must carry progress 1.0")

    @classmethod
    def success(cls, detail: str | None = None) -> Feedback:
        return cls(Outcome.SUCCESS, 1.0, detail)

    @classmethod
    def failure(cls, progress: float = 0.0, detail: str | None = None) -> Feedback:
        return cls(Outcome.FAILURE, progress, detail)

    @classmethod
    def ungraded(cls, detail: str | None = None) -> Feedback:
        return cls(Outcome.UNGRADED, 0.0, detail)

    @property
    def graded(self) -> bool:
        return self.outcome is not Outcome.UNGRADED

    def to_dict(self) -> dict:
        return {"outcome": self.outcome.value, "progress": self.progress, "detail": self.detail}

    @classmethod
    def from_dict(cls, d: dict) -> Feedback:
        return cls(Outcome(d["outcome"]), float(d["progress"]), d.get("detail"))


@dataclass(frozen=True)
class MemoryEntry:
    id: int
    task_input: str
    prediction: str
    feedback: Feedback
    rendered: str
    embedding: tuple[float, ...]
    created_step: int
    utility: int = 0
    active: bool = True

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "task_input": self.task_input,
            "prediction": self.prediction,
            "feedback": self.feedback.to_dict(),
            "rendered": self.rendered,
            "embedding": list(self.embedding),
            "created_step": self.created_step,
            "utility": self.utility,
            "active": self.active,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MemoryEntry:
        return cls(
            id=int(d["id"]),
            task_input=d["task_input"],
            prediction=d["prediction"],
            feedback=Feedback.from_dict(d["feedback"]),
            rendered=d["rendered"],
            embedding=tuple(float(x) for x in d["embedding"]),
            created_step=int(d["created_step"]),
            utility=int(d["utility"]),
            active=bool(d["active"]),
        )


@dataclass(frozen=True)
class MemoryState:
    """Immutable memory store. Every transition returns a new state."""

    policy: Policy = Policy.EXPRAG
    capacity: int | None = None
    ingest_failures: bool = False
    entries: tuple[MemoryEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        object.__setattr__(self, "entries", tuple(self.entries))
        if self.capacity is not None and self.capacity < 1:
            raise InvalidInput("capacity must be a positive integer")

    @property
    def active_entries(self) -> list[MemoryEntry]:
        return [e for e in self.entries if e.active]

    @property
    def active_count(self) -> int:
        return sum(1 for e in self.entries if e.active)

    @property
    def next_id(self) -> int:
        return self.entries[-1].id + 1 if self.entries else 1

    def get(self, entry_id: int) -> MemoryEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise KeyError(entry_id)

    @cached_property
    def _index(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        # (embedding matrix, ids, active mask, failure mask) over all entries
        if not self.entries:
            empty = np.zeros(0, dtype=bool)
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64), empty, empty
        matrix = np.array([e.embedding for e in self.entries], dtype=np.float64)
        ids = np.array([e.id for e in self.entries], dtype=np.int64)
        active = np.array([e.active for e in self.entries], dtype=bool)
        failed = np.array([e.feedback.outcome is Outcome.FAILURE for e in self.entries], dtype=bool)
        return matrix, ids, active, failed

    def replace_entries(self, entries: Iterable[MemoryEntry]) -> MemoryState:
        return dataclasses.replace(self, entries=tuple(entries))


def render_experience(task_input: str, prediction: str, feedback: Feedback) -> str:
    """Render the three-line Goal/Trajectory/Correctness experience block."""
    if not task_input:
        raise InvalidInput("task_input must be non-empty")
    return f"Goal: {task_input}\nTrajectory: {prediction}\nCorrectness: {Outcome(feedback.outcome).value}"


def check_unit(vector: Sequence[float], what: str = "embedding") -> None:
    norm = math.sqrt(math.fsum(float(x) * float(x) for x in vector))
    if not abs(norm - 1.0) <= UNIT_TOL:
        raise InvalidEmbedding(f"{what} must be unit-norm (got norm {norm:.9g})")


def evolve(
    state: MemoryState,
    task_input: str,
    prediction: str,
    feedback: Feedback,
    embedding: Sequence[float],
    step: int = 0,
) -> MemoryState:
    """Ingest one graded experience according to the state's policy."""
    check_unit(embedding)
    if state.policy is Policy.BASELINE:
        return state
    if feedback.outcome is Outcome.FAILURE and not state.ingest_failures:
        return state

    entry = MemoryEntry(
        id=state.next_id,
        task_input=task_input,
        prediction=prediction,
        feedback=feedback,
        rendered=render_experience(task_input, prediction, feedback),
        embedding=tuple(float(x) for x in embedding),
        created_step=step,
    )
    entries = list(state.entries) + [entry]

    if state.capacity is not None:
        active = [e for e in entries if e.active]
        if len(active) > state.capacity:
            # the entry just ingested is never its own eviction victim
            candidates = active[:-1]
            if state.policy.evicts_by_utility:
                victim = min(candidates, key=lambda e: (e.utility, e.id))
            else:
                victim = candidates[0]
            entries = [dataclasses.replace(e, active=False) if e.id == victim.id else e for e in entries]
    return state.replace_entries(entries)


def recent_window(state: MemoryState, n: int) -> list[MemoryEntry]:
    """Last ``n`` active entries in insertion order."""
    if n < 1:
        raise InvalidInput("window size must be >= 1")
    active = state.active_entries
    return active[-n:]


def adjust_utility(
    state: MemoryState,
    entry_ids: Iterable[int],
    delta: int,
    deactivate_at: int | None = None,
) -> MemoryState:
    """Add ``delta`` to each listed entry's utility (once per occurrence).

    With ``deactivate_at`` set, any touched entry whose utility ends at or below
    the threshold is deactivated.
    """
    counts: dict[int, int] = {}
    for i in entry_ids:
        counts[i] = counts.get(i, 0) + 1
    if not counts:
        return state
    out = []
    for e in state.entries:
        if e.id in counts:
            u = e.utility + delta * counts[e.id]
            active = e.active and not (deactivate_at is not None and u <= deactivate_at)
            e = dataclasses.replace(e, utility=u, active=active)
        out.append(e)
    return state.replace_entries(out)


# -- snapshot format ---------------------------------------------------------


def dumps_snapshot(state: MemoryState) -> str:
    header = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "policy": state.policy.value,
        "capacity": state.capacity,
        "ingest_failures": state.ingest_failures,
        "count": len(state.entries),
    }
    lines = [json.dumps(header)]
    lines.extend(json.dumps(e.to_dict()) for e in state.entries)
    return "\n".join(lines) + "\n"


def loads_snapshot(text: str) -> MemoryState:
    lines = text.split("\n")
    if not lines or not lines[0].strip():
        raise SnapshotError("snapshot is missing its header line")
    if not text.endswith("\n"):
        raise SnapshotError("snapshot is truncated (no trailing newline)")
    try:
        header = json.loads(lines[0])
        if header.get("format") != SNAPSHOT_FORMAT:
            raise SnapshotError(f"not a memory snapshot: format={header.get('format')!r}")
        body = [ln for ln in lines[1:] if ln.strip()]
        if len(body) != header["count"]:
            raise SnapshotError(f"snapshot declares {header['count']} entries, found {len(body)}")
        entries = [MemoryEntry.from_dict(json.loads(ln)) for ln in body]
        state = MemoryState(
            policy=Policy(header["policy"]),
            capacity=header["capacity"],
            ingest_failures=bool(header["ingest_failures"]),
            entries=tuple(entries),
        )
    except SnapshotError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise SnapshotError(f"corrupt snapshot: {exc}") from exc
    ids = [e.id for e in state.entries]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise SnapshotError("snapshot entry ids are not strictly increasing")
    return state


def save_snapshot(state: MemoryState, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps_snapshot(state), encoding="utf-8")
    tmp.replace(path)


def load_snapshot(path: str | Path) -> MemoryState:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise SnapshotError(f"corrupt snapshot: {exc}") from exc
    return loads_snapshot(text)
