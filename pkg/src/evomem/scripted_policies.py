"""Hand-written deterministic agents that read the rendered prompt like a model would.

They make memory effects observable without a real LLM: answers and plans
improve only when the prompt carries a relevant prior experience.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .backends import CallableBackend
from .environments import VAULT

WRONG_GUESS = "unknown"

_SECTION = re.compile(r"^={50}\n(?P<name>[A-Z ]+)\n={50}\n", re.MULTILINE)
_EXPERIENCE = re.compile(
    r"\[Experience #(?P<idx>\d+)\]\nGoal: (?P<goal>.*)\nTrajectory: (?P<traj>.*)\nCorrectness: (?P<ok>\w+)"
)
_LOCATION = re.compile(r"You are in the (\w+)\.")


_QUESTION = re.compile(r"^Question: (.*)$", re.MULTILINE)


def qa_reuse_policy(answers: dict[str, str], wrong: str = WRONG_GUESS):
    """Answers question q correctly only when its prompt shows a prior experience for q.

    A success block carries the answer; a failure block recording the default
    guess tells the model that guess was wrong, so it answers from ``answers``.
    Without either it guesses ``wrong``. Replies follow the prompt's format.
    """

    def reply(prompt: str) -> str:
        multi = "OUTPUT FORMAT" in prompt
        if multi:
            question = parse_multi_turn_prompt(prompt).goal
        else:
            m = _QUESTION.search(prompt)
            question = m.group(1) if m else ""
        answer = wrong
        for _, goal, traj, ok in _EXPERIENCE.findall(prompt):
            if goal != question:
                continue
            if ok == "success":
                answer = traj
                break
            if ok == "failure" and traj == wrong and question in answers:
                answer = answers[question]
        if multi:
            return f"Action: {answer}"
        note = "recalled a prior attempt" if answer != wrong else "no relevant memory"
        return f"Rationale: {note}\nFinal Answer: {answer}"

    return reply


def qa_reuse_backend(qa_pairs, wrong: str = WRONG_GUESS) -> CallableBackend:
    return CallableBackend(qa_reuse_policy(dict(qa_pairs), wrong), identifier="qa-reuse")


# -- KeyDoor -------------------------------------------------------------------


@dataclass
class ParsedPrompt:
    goal: str
    experiences: list[tuple[int, str, str, str]]
    history: list[str]


def parse_multi_turn_prompt(prompt: str) -> ParsedPrompt:
    marks = list(_SECTION.finditer(prompt))
    sections = {}
    for m, nxt in zip(marks, marks[1:] + [None]):
        end = nxt.start() if nxt else len(prompt)
        sections[m.group("name")] = prompt[m.end() : end].strip("\n")
    task = sections.get("YOUR CURRENT TASK", "")
    goal = task.split("\n", 1)[0][len("Goal: ") :] if task.startswith("Goal: ") else ""
    exps = [
        (int(m.group("idx")), m.group("goal"), m.group("traj"), m.group("ok"))
        for m in _EXPERIENCE.finditer(sections.get("RELEVANT EXPERIENCE FROM SIMILAR TASKS", ""))
    ]
    hist = sections.get("RECENT HISTORY", "")
    return ParsedPrompt(goal, exps, [] if hist == "(none)" else hist.split("\n"))


def distill_plan(trajectory: str) -> list[str]:
    """Keep only the effective actions of a successful trajectory.

    Each of take key / unlock door / open chest is kept together with the
    move that preceded it; detours are dropped.
    """
    actions = [a.strip() for a in trajectory.split(";") if a.strip()]
    plan: list[str] = []
    last_go = None
    for a in actions:
        if a.startswith("go "):
            last_go = a
        elif a in ("take key", "unlock door", "open chest"):
            if last_go is not None:
                plan.append(last_go)
                last_go = None
            plan.append(a)
    return plan


def _rooms_from_goal(goal: str) -> list[str]:
    if "has: " not in goal:
        return []
    names = goal.split("has: ", 1)[1].rstrip(".")
    return [n.strip() for n in names.split(",") if n.strip()]


def explore_action(goal: str, history: list[str]) -> str:
    """Fixed heuristic: sweep rooms in listed order, act on whatever is found."""
    location = None
    visited: list[str] = []
    key_room = door_room = None
    has_key = unlocked = False
    for line in history:
        if not line.startswith("Observation: "):
            continue
        obs = line[len("Observation: ") :]
        m = _LOCATION.search(obs)
        if m:
            location = m.group(1)
            if location not in visited:
                visited.append(location)
            if "a key" in obs:
                key_room = location
            if "locked door" in obs:
                door_room = location
        if obs.startswith("You take the key"):
            has_key = True
        if obs.startswith("You unlock the door"):
            unlocked = True
    if location == VAULT:
        return "open chest"
    if location == key_room and not has_key:
        return "take key"
    if has_key and location == door_room and not unlocked:
        return "unlock door"
    if unlocked and location == door_room:
        return f"go {VAULT}"
    if has_key and door_room is not None:
        return f"go {door_room}"
    if not any(line.startswith("Action: ") for line in history):
        return "check valid actions"
    for room in _rooms_from_goal(goal):
        if room not in visited:
            return f"go {room}"
    return "check valid actions"


def _successful_plan(parsed: ParsedPrompt) -> list[str] | None:
    for _, goal, traj, ok in parsed.experiences:
        if goal == parsed.goal and ok == "success":
            plan = distill_plan(traj)
            if plan:
                return plan
    return None


def keydoor_policy(prompt: str) -> str:
    """Replay a retrieved successful trajectory for the same goal, else explore."""
    parsed = parse_multi_turn_prompt(prompt)
    taken = [ln[len("Action: ") :] for ln in parsed.history if ln.startswith("Action: ")]
    plan = _successful_plan(parsed)
    if plan is not None and taken == plan[: len(taken)] and len(taken) < len(plan):
        return f"Action: {plan[len(taken)]}"
    return f"Action: {explore_action(parsed.goal, parsed.history)}"


def keydoor_remem_policy(prompt: str) -> str:
    """Like ``keydoor_policy``, but when a same-goal success is in view it first prunes the rest."""
    parsed = parse_multi_turn_prompt(prompt)
    noise = [idx for idx, goal, _, _ in parsed.experiences if goal != parsed.goal]
    if noise and _successful_plan(parsed) is not None:
        return "Think-Prune: " + ",".join(str(i) for i in noise)
    return keydoor_policy(prompt)


def keydoor_backend(remem: bool = False) -> CallableBackend:
    if remem:
        return CallableBackend(keydoor_remem_policy, identifier="keydoor-remem")
    return CallableBackend(keydoor_policy, identifier="keydoor-replay")
