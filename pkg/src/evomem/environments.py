"""Task records, the exact-match QA grader, and the KeyDoor text world."""

from __future__ import annotations

import enum
import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from .errors import BackendError, InvalidInput
from .memory import Feedback

DEFAULT_STEP_CAP = 30
SUBGOALS = ("reach key room", "hold key", "door unlocked", "chest opened")

ROOM_NAMES = (
    "kitchen", "garden", "attic", "cellar", "library", "study", "pantry", "hallway",
    "bedroom", "workshop", "gallery", "nursery", "chapel", "armory", "greenhouse", "parlor",
)
VAULT = "vault"


class EnvKind(str, enum.Enum):
    SINGLE_TURN_QA = "single_turn_qa"
    KEYDOOR = "keydoor"


@dataclass(frozen=True)
class TaskRecord:
    id: str
    input: str
    expected: str | None = None
    difficulty: float | None = None
    domain_tag: str = ""
    env: EnvKind = EnvKind.SINGLE_TURN_QA
    env_params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "env", EnvKind(self.env))
        if not self.input:
            raise InvalidInput(f"task {self.id!r} has an empty input")
        if self.env is EnvKind.SINGLE_TURN_QA and self.expected is None:
            raise InvalidInput(f"QA task {self.id!r} needs an expected answer")
        if self.env is EnvKind.KEYDOOR and "seed" not in self.env_params:
            raise InvalidInput(f"KeyDoor task {self.id!r} needs env_params.seed")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "input": self.input,
            "expected": self.expected,
            "difficulty": self.difficulty,
            "domain_tag": self.domain_tag,
            "env": self.env.value,
            "env_params": self.env_params,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TaskRecord:
        known = {"id", "input", "expected", "difficulty", "domain_tag", "env", "env_params"}
        extra = set(d) - known
        if extra:
            raise InvalidInput(f"unknown task fields: {sorted(extra)}")
        diff = d.get("difficulty")
        return cls(
            id=str(d["id"]),
            input=d["input"],
            expected=d.get("expected"),
            difficulty=float(diff) if diff is not None else None,
            domain_tag=d.get("domain_tag", ""),
            env=EnvKind(d.get("env", EnvKind.SINGLE_TURN_QA.value)),
            env_params=dict(d.get("env_params") or {}),
        )


def load_tasks(path: str | Path) -> list[TaskRecord]:
    tasks = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                tasks.append(TaskRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise InvalidInput(f"{path}:{lineno}: {exc}") from exc
    return tasks


def write_tasks(tasks: Sequence[TaskRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in tasks:
            f.write(json.dumps(t.to_dict()) + "\n")


# -- single-turn QA ------------------------------------------------------------

_WS = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    text = _WS.sub(" ", text.strip()).lower()
    return text[:-1].rstrip() if text.endswith(".") else text


def grade_single_turn(prediction: str, expected: str) -> Feedback:
    if normalize_answer(prediction) == normalize_answer(expected):
        return Feedback.success()
    return Feedback.failure(0.0)


# -- KeyDoor -------------------------------------------------------------------


@dataclass(frozen=True)
class KeyDoorLayout:
    rooms: tuple[str, ...]
    start: str
    key_room: str
    door_room: str

    @classmethod
    def from_seed(cls, seed: int, n_rooms: int = 4) -> KeyDoorLayout:
        if not 3 <= n_rooms <= len(ROOM_NAMES):
            raise InvalidInput(f"rooms must be in [3, {len(ROOM_NAMES)}], got {n_rooms}")
        rng = random.Random(seed)
        rooms = tuple(rng.sample(ROOM_NAMES, n_rooms))
        start, key_room, door_room = rng.sample(rooms, 3)
        return cls(rooms, start, key_room, door_room)

    def solution(self) -> list[str]:
        return [
            f"go {self.key_room}",
            "take key",
            f"go {self.door_room}",
            "unlock door",
            f"go {VAULT}",
            "open chest",
        ]


def keydoor_goal(seed: int, n_rooms: int = 4) -> str:
    layout = KeyDoorLayout.from_seed(seed, n_rooms)
    names = ", ".join(sorted(layout.rooms))
    return f"Find the key, unlock the vault door, and open the chest. The house has: {names}."


def keydoor_task(seed: int, n_rooms: int = 4, task_id: str | None = None, difficulty: float | None = None) -> TaskRecord:
    return TaskRecord(
        id=task_id or f"keydoor-{seed}",
        input=keydoor_goal(seed, n_rooms),
        difficulty=difficulty,
        domain_tag="keydoor",
        env=EnvKind.KEYDOOR,
        env_params={"seed": seed, "rooms": n_rooms},
    )


KEYDOOR_INSTRUCTIONS = (
    "You are in a small house of rooms. One room holds a key; another has a locked door to the vault, "
    "where a chest stands. Commands: go <room>, take key, unlock door, open chest, "
    "check valid actions, inventory. The vault can only be entered from the room with the door, "
    "after the door is unlocked."
)
KEYDOOR_DEMONSTRATIONS = (
    "Example 1: Goal: open the chest | Action: go study | Observation: You are in the study. You see a key.\n"
    "Example 2: Goal: open the chest | Action: unlock door | Observation: You unlock the door."
)


class KeyDoorWorld:
    """Mutable episode state over a seeded layout. Every call to ``step`` costs one step."""

    def __init__(self, seed: int, rooms: int = 4, step_cap: int = DEFAULT_STEP_CAP):
        self.layout = KeyDoorLayout.from_seed(seed, rooms)
        self.step_cap = step_cap
        self.location = self.layout.start
        self.has_key = False
        self.key_taken = False
        self.unlocked = False
        self.opened = False
        self.reached_key_room = False
        self.steps = 0

    @classmethod
    def from_task(cls, task: TaskRecord, step_cap: int = DEFAULT_STEP_CAP) -> KeyDoorWorld:
        return cls(int(task.env_params["seed"]), int(task.env_params.get("rooms", 4)), step_cap)

    @property
    def subgoals_done(self) -> int:
        flags = (self.reached_key_room, self.has_key, self.unlocked, self.opened)
        done = 0
        for f in flags:
            if not f:
                break
            done += 1
        return done

    @property
    def done(self) -> bool:
        return self.opened or self.steps >= self.step_cap

    def describe(self) -> str:
        if self.location == VAULT:
            what = "You see an open chest." if self.opened else "You see a closed chest."
        else:
            seen = []
            if self.location == self.layout.key_room and not self.key_taken:
                seen.append("a key")
            if self.location == self.layout.door_room:
                seen.append("an unlocked door" if self.unlocked else "a locked door")
            what = f"You see {' and '.join(seen)}." if seen else "You see nothing special."
        return f"You are in the {self.location}. {what}"

    def valid_actions(self) -> list[str]:
        acts = [f"go {r}" for r in self.layout.rooms if r != self.location]
        if self.location == self.layout.door_room and self.unlocked:
            acts.append(f"go {VAULT}")
        if self.location == self.layout.key_room and not self.key_taken:
            acts.append("take key")
        if self.location == self.layout.door_room and self.has_key and not self.unlocked:
            acts.append("unlock door")
        if self.location == VAULT and not self.opened:
            acts.append("open chest")
        return acts + ["check valid actions", "inventory"]

    def step(self, action: str) -> tuple[str, bool]:
        self.steps += 1
        obs = self._transition(" ".join(action.strip().lower().split()))
        if self.location == self.layout.key_room:
            self.reached_key_room = True
        return obs, self.done

    def _transition(self, action: str) -> str:
        nothing = "Nothing happens."
        if action == "inventory":
            return "You carry a key." if self.has_key else "You carry nothing."
        if action == "check valid actions":
            return "Valid actions: " + ", ".join(self.valid_actions()) + "."
        if action.startswith("go "):
            target = action[3:]
            if target == VAULT:
                if self.location != self.layout.door_room:
                    return nothing
                if not self.unlocked:
                    return "The door is locked."
            elif target not in self.layout.rooms or target == self.location:
                return nothing
            elif self.location == VAULT and self.layout.door_room != target:
                return nothing
            self.location = target
            return self.describe()
        if action == "take key" and self.location == self.layout.key_room and not self.key_taken:
            self.key_taken = self.has_key = True
            return "You take the key."
        if action == "unlock door" and self.location == self.layout.door_room and self.has_key and not self.unlocked:
            self.unlocked = True
            return "You unlock the door."
        if action == "open chest" and self.location == VAULT and not self.opened:
            self.opened = True
            return "You open the chest. Task complete."
        return nothing


def keydoor_step(world: KeyDoorWorld, action: str) -> tuple[str, bool]:
    return world.step(action)


@dataclass
class EnvOutcome:
    feedback: Feedback
    steps_taken: int
    subgoals_total: int
    subgoals_done: int
    transcript: list[tuple[str, str]] = field(default_factory=list)


def run_episode(
    task: TaskRecord,
    agent_step: Callable[[list[str]], str],
    cap: int = DEFAULT_STEP_CAP,
) -> EnvOutcome:
    """Alternate agent actions and observations until the world is done.

    ``agent_step`` receives the history lines so far (starting with the
    initial observation) and returns the next action. A ``BackendError`` from
    it ends the episode as ungraded with the partial transcript.
    """
    if task.env is not EnvKind.KEYDOOR:
        raise InvalidInput(f"run_episode needs a KeyDoor task, got {task.env.value}")
    world = KeyDoorWorld.from_task(task, cap)
    history = [f"Observation: {world.describe()}"]
    transcript: list[tuple[str, str]] = []
    total = len(SUBGOALS)
    while not world.done:
        try:
            action = agent_step(list(history))
        except BackendError as exc:
            return EnvOutcome(Feedback.ungraded(str(exc)), len(transcript), total, world.subgoals_done, transcript)
        obs, _ = world.step(action)
        transcript.append((action, obs))
        history += [f"Action: {action}", f"Observation: {obs}"]
    done = world.subgoals_done
    feedback = Feedback.success() if done == total else Feedback.failure(done / total)
    return EnvOutcome(feedback, len(transcript), total, done, transcript)
