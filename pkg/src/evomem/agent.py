"""ReMem step loop (Think / Think-Prune / Action) and one-shot experience synthesis."""

from __future__ import annotations

import dataclasses
import enum
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Iterable, Sequence, Union

from .backends import ModelBackend
from .errors import InvalidInput, InvalidPrune, MalformedOperation
from .memory import MemoryState, adjust_utility
from .retrieval import ScoredEntry

NONE_TEXT = "(none)"
TRUNCATION_MARK = "...[truncated]"
REPROMPT_NOTE = "Observation: Invalid format. Respond with exactly one line starting with Think-Prune:, Think:, or Action:."
DEFAULT_INSTRUCTIONS = "Solve the task in YOUR CURRENT TASK. Submit your final answer as: Action: <answer>"


class PromptMode(str, enum.Enum):
    MULTI_TURN = "multi_turn"
    SINGLE_TURN = "single_turn"


def _load_template(name: str) -> str:
    text = resources.files("evomem").joinpath("templates", name).read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


MULTI_TURN_TEMPLATE = _load_template("multi_turn.v1.txt")
SINGLE_TURN_TEMPLATE = _load_template("single_turn.v1.txt")
OUTPUT_FORMAT = MULTI_TURN_TEMPLATE[MULTI_TURN_TEMPLATE.index("You MUST respond") :]


# -- operations ----------------------------------------------------------------


@dataclass(frozen=True)
class Think:
    text: str


@dataclass(frozen=True)
class Prune:
    indices: frozenset[int]

    def __post_init__(self):
        if not self.indices:
            raise InvalidInput("a prune needs at least one index")


@dataclass(frozen=True)
class Act:
    text: str
    forced: bool = False


AgentOperation = Union[Think, Prune, Act]


def format_ids(indices: Iterable[int]) -> str:
    return ",".join(str(i) for i in sorted(indices))


def render_operation(op: AgentOperation) -> str:
    if isinstance(op, Think):
        return f"Think: {op.text}"
    if isinstance(op, Prune):
        return f"Think-Prune: {format_ids(op.indices)}"
    return f"Action: {op.text}"


_ID_ITEM = re.compile(r"^\s*(\d+)\s*(?:-\s*(\d+)\s*)?$")


def parse_ids(text: str, limit: int | None = None) -> frozenset[int]:
    """Parse a 1-based id list such as ``"1,3"``, ``"2-4"`` or ``"1,3-5"``."""
    out: set[int] = set()
    for item in text.split(","):
        m = _ID_ITEM.match(item)
        if not m:
            raise MalformedOperation(f"bad prune id item {item!r}")
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) is not None else lo
        if lo < 1 or hi < lo:
            raise MalformedOperation(f"bad prune range {item.strip()!r}")
        out.update(range(lo, hi + 1))
    if limit is not None and max(out) > limit:
        raise InvalidPrune(f"prune index {max(out)} outside working set of size {limit}")
    return frozenset(out)


_PREFIXES = (("think-prune:", "prune"), ("think:", "think"), ("action:", "act"))


def parse_operation(raw: str, limit: int | None = None) -> AgentOperation:
    """Parse one model reply. Only the first non-empty line decides the operation.

    ``Think:`` keeps everything after the prefix (it may span lines);
    ``Action:`` keeps the rest of its own line.
    """
    stripped = raw.lstrip()
    first = stripped.split("\n", 1)[0]
    lowered = first.lower()
    for prefix, kind in _PREFIXES:
        if lowered.startswith(prefix):
            if kind == "prune":
                return Prune(parse_ids(first[len(prefix) :], limit))
            if kind == "think":
                return Think(stripped[len(prefix) :].strip())
            return Act(first[len(prefix) :].strip())
    raise MalformedOperation(f"no operation prefix in reply: {first[:80]!r}")


# -- prompt assembly -----------------------------------------------------------


@dataclass(frozen=True)
class PromptContext:
    mode: PromptMode
    sections: tuple[tuple[str, str], ...]
    rendered: str

    def section(self, name: str) -> str:
        return dict(self.sections)[name]


def _cut_tail(text: str, n: int) -> str:
    if n >= len(text):
        return text
    if len(text) <= len(TRUNCATION_MARK):
        return text
    return text[: max(0, n - len(TRUNCATION_MARK))] + TRUNCATION_MARK


def _cut_head(text: str, n: int) -> str:
    if n >= len(text):
        return text
    if len(text) <= len(TRUNCATION_MARK):
        return text
    keep = max(0, n - len(TRUNCATION_MARK))
    return TRUNCATION_MARK + (text[len(text) - keep :] if keep else "")


def _experience_text(experiences: Sequence[tuple[int, str]]) -> str:
    if not experiences:
        return NONE_TEXT
    return "\n\n".join(f"[Experience #{i}]\n{body}" for i, body in experiences)


def build_prompt(
    task_input: str,
    experiences: Sequence[tuple[int, str]] = (),
    history: Sequence[str] = (),
    mode: PromptMode | str = PromptMode.MULTI_TURN,
    *,
    instructions: str = DEFAULT_INSTRUCTIONS,
    demonstrations: str = "",
    budget: int = 8000,
) -> PromptContext:
    """Render the multi-turn or single-turn memory prompt within ``budget`` characters.

    Over budget, text is cut in this order: demonstrations, experience bodies
    (last experience first), oldest history, instructions. The task and
    output-format sections are never cut.
    """
    mode = PromptMode(mode)
    if [i for i, _ in experiences] != list(range(1, len(experiences) + 1)):
        raise InvalidInput("experience indices must run 1..m")
    exps = [list(e) for e in experiences]
    demos = demonstrations or NONE_TEXT
    hist = "\n".join(history) or NONE_TEXT
    instr = instructions or NONE_TEXT

    def sections():
        exp_text = _experience_text([tuple(e) for e in exps])
        if mode is PromptMode.MULTI_TURN:
            return (
                ("instructions", instr),
                ("demonstrations", demos),
                ("experiences", exp_text),
                ("task", task_input),
                ("history", hist),
                ("output_format", OUTPUT_FORMAT),
            )
        task = task_input if not history else f"{task_input}\n\nRecent history:\n{hist}"
        return (("experiences", exp_text), ("task", task))

    def render():
        s = dict(sections())
        if mode is PromptMode.MULTI_TURN:
            return MULTI_TURN_TEMPLATE.format(
                instructions=s["instructions"],
                demonstrations=s["demonstrations"],
                experiences=s["experiences"],
                task=s["task"],
                history=s["history"],
            )
        return SINGLE_TURN_TEMPLATE.format(experiences=s["experiences"], task=s["task"])

    text = render()
    over = len(text) - budget
    if over > 0 and mode is PromptMode.MULTI_TURN and demonstrations:
        demos = _cut_tail(demos, len(demos) - over)
        text = render()
        over = len(text) - budget
    for e in reversed(exps):
        if over <= 0:
            break
        e[1] = _cut_tail(e[1], len(e[1]) - over)
        text = render()
        over = len(text) - budget
    if over > 0 and history:
        hist = _cut_head(hist, len(hist) - over)
        text = render()
        over = len(text) - budget
    if over > 0 and mode is PromptMode.MULTI_TURN:
        instr = _cut_tail(instr, len(instr) - over)
        text = render()
        over = len(text) - budget
    if over > 0:
        raise InvalidInput(f"prompt budget {budget} cannot hold the task and output format ({len(text)} chars)")
    return PromptContext(mode, sections(), text)


# -- step loop -----------------------------------------------------------------


@dataclass(frozen=True)
class AgentConfig:
    max_ops: int = 6
    prompt_budget: int = 8000
    mode: str = "auto"
    prune_deactivate_threshold: int = -2

    def __post_init__(self):
        if self.max_ops < 1:
            raise InvalidInput("max_ops must be >= 1")
        if self.mode not in ("auto", PromptMode.MULTI_TURN.value, PromptMode.SINGLE_TURN.value):
            raise InvalidInput(f"unknown agent mode {self.mode!r}")


@dataclass(frozen=True)
class AgentStepState:
    task_input: str
    working_set: tuple[tuple[int, int], ...] = ()
    trace: tuple[AgentOperation, ...] = ()
    ops_used: int = 0
    max_ops: int = 6

    @classmethod
    def start(cls, task_input: str, entry_ids: Iterable[int], max_ops: int) -> AgentStepState:
        ws = tuple((i, eid) for i, eid in enumerate(entry_ids, start=1))
        return cls(task_input, ws, (), 0, max_ops)

    @property
    def entry_ids(self) -> list[int]:
        return [eid for _, eid in self.working_set]


def apply_prune(
    step: AgentStepState,
    state: MemoryState,
    indices: Iterable[int],
    deactivate_at: int = -2,
) -> tuple[AgentStepState, MemoryState]:
    """Drop the given display indices from the working set and charge their entries."""
    indices = set(indices)
    if not indices or any(i < 1 or i > len(step.working_set) for i in indices):
        raise InvalidPrune(f"prune {sorted(indices)} outside working set of size {len(step.working_set)}")
    pruned = [eid for i, eid in step.working_set if i in indices]
    kept = [eid for i, eid in step.working_set if i not in indices]
    ws = tuple((i, eid) for i, eid in enumerate(kept, start=1))
    return dataclasses.replace(step, working_set=ws), adjust_utility(state, pruned, -1, deactivate_at)


@dataclass
class StepOutcome:
    payload: str
    state: MemoryState
    trace: list[AgentOperation]
    step: AgentStepState
    backend_calls: int = 0
    malformed: int = 0
    pruned_ids: list[int] = field(default_factory=list)


def run_step(
    task_input: str,
    state: MemoryState,
    backend: ModelBackend,
    cfg: AgentConfig = AgentConfig(),
    *,
    working_set: Sequence[int] | AgentStepState = (),
    history: Sequence[str] = (),
    instructions: str = DEFAULT_INSTRUCTIONS,
    demonstrations: str = "",
    on_prompt: Callable[[str], None] | None = None,
) -> StepOutcome:
    """Run Think/Prune operations until an Action (or the op cap) ends the step.

    ``working_set`` is either the retrieved entry ids or a step state carried
    over from an earlier environment step (its prunes persist; its trace does
    not). Malformed replies get one re-prompt per step; after that the raw
    reply is forced into an Action, as is any non-Action at the op cap.
    """
    if isinstance(working_set, AgentStepState):
        step = AgentStepState.start(task_input, working_set.entry_ids, cfg.max_ops)
    else:
        step = AgentStepState.start(task_input, working_set, cfg.max_ops)
    entries = {e.id: e for e in state.entries}
    notes: list[str] = []
    calls = malformed = 0
    reprompted = False
    pruned_ids: list[int] = []

    while True:
        experiences = [(i, entries[eid].rendered) for i, eid in step.working_set]
        lines = list(history) + [render_operation(op) for op in step.trace] + notes
        prompt = build_prompt(
            task_input,
            experiences,
            lines,
            PromptMode.MULTI_TURN,
            instructions=instructions,
            demonstrations=demonstrations,
            budget=cfg.prompt_budget,
        ).rendered
        if on_prompt is not None:
            on_prompt(prompt)
        raw = backend.complete(prompt)
        calls += 1
        at_cap = step.ops_used + 1 >= step.max_ops
        try:
            op = parse_operation(raw, limit=len(step.working_set))
        except MalformedOperation:
            malformed += 1
            if not reprompted:
                reprompted = True
                notes.append(REPROMPT_NOTE)
                continue
            op = Act(raw.strip(), forced=True)
        if at_cap and not isinstance(op, Act):
            op = Act(raw.strip(), forced=True)
        if isinstance(op, Prune):
            before = dict(step.working_set)
            step, state = apply_prune(step, state, op.indices, cfg.prune_deactivate_threshold)
            pruned_ids.extend(before[i] for i in sorted(op.indices))
        step = dataclasses.replace(step, trace=step.trace + (op,), ops_used=step.ops_used + 1)
        if isinstance(op, Act):
            return StepOutcome(op.text, state, list(step.trace), step, calls, malformed, pruned_ids)


# -- one-shot synthesis --------------------------------------------------------

_FINAL_ANSWER = re.compile(r"final answer\s*:", re.IGNORECASE)


def extract_final_answer(completion: str) -> str:
    """Text after the last "Final Answer:" marker, else the whole completion, trimmed."""
    matches = list(_FINAL_ANSWER.finditer(completion))
    if not matches:
        return completion.strip()
    return completion[matches[-1].end() :].strip()


def extract_action(completion: str) -> str:
    """Action payload of a reply; falls back to its first non-empty line."""
    try:
        op = parse_operation(completion)
    except MalformedOperation:
        op = None
    if isinstance(op, Act):
        return op.text
    for line in completion.splitlines():
        if line.strip():
            return line.strip()
    return ""


def synthesize(
    task_input: str,
    experiences: Sequence[str],
    backend: ModelBackend,
    mode: PromptMode | str = PromptMode.SINGLE_TURN,
    *,
    history: Sequence[str] = (),
    instructions: str = DEFAULT_INSTRUCTIONS,
    demonstrations: str = "",
    budget: int = 8000,
    on_prompt: Callable[[str], None] | None = None,
) -> str:
    """One backend call on a memory-augmented prompt."""
    mode = PromptMode(mode)
    ctx = build_prompt(
        task_input,
        list(enumerate(experiences, start=1)),
        history,
        mode,
        instructions=instructions,
        demonstrations=demonstrations,
        budget=budget,
    )
    if on_prompt is not None:
        on_prompt(ctx.rendered)
    completion = backend.complete(ctx.rendered)
    if mode is PromptMode.SINGLE_TURN:
        return extract_final_answer(completion)
    return extract_action(completion)


def synthesize_exprag(
    task_input: str,
    retrieved: Sequence[ScoredEntry],
    state: MemoryState,
    backend: ModelBackend,
    *,
    budget: int = 8000,
    on_prompt: Callable[[str], None] | None = None,
) -> str:
    """Single-turn ExpRAG answer conditioned on the retrieved experiences, in score order."""
    entries = {e.id: e for e in state.entries}
    texts = [entries[s.entry_id].rendered for s in retrieved]
    return synthesize(task_input, texts, backend, PromptMode.SINGLE_TURN, budget=budget, on_prompt=on_prompt)
