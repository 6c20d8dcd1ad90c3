"""Stream runner: search -> synthesize -> evolve over an ordered task stream."""

from __future__ import annotations

import dataclasses
import json
import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .agent import AgentStepState, PromptMode, run_step, synthesize
from .backends import ModelBackend
from .config import Ordering, StreamSpec, make_backend, make_spec_embedder
from .environments import (
    KEYDOOR_DEMONSTRATIONS,
    KEYDOOR_INSTRUCTIONS,
    EnvKind,
    TaskRecord,
    grade_single_turn,
    load_tasks,
    run_episode,
)
from .errors import BackendError, InvalidStream, StreamAborted
from .memory import (
    Feedback,
    MemoryState,
    Outcome,
    Policy,
    adjust_utility,
    evolve,
    load_snapshot,
    recent_window,
    save_snapshot,
)
from .retrieval import Embedder, top_k

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.jsonl"
SNAPSHOT_FILE = "memory.snapshot.jsonl"
CONFIG_FILE = "config.resolved.json"
CHECKPOINT_FILE = "checkpoint.json"
PROMPTS_DIR = "prompts"

QA_INSTRUCTIONS = "Answer the question in YOUR CURRENT TASK. Submit your final answer as: Action: <answer>"


def build_stream(tasks: Sequence[TaskRecord], ordering: Ordering | str = Ordering.GIVEN, seed: int | None = None) -> list[TaskRecord]:
    ordering = Ordering(ordering)
    tasks = list(tasks)
    if ordering is Ordering.GIVEN:
        return tasks
    if ordering is Ordering.SHUFFLED:
        if seed is None:
            raise InvalidStream("shuffled ordering needs a seed")
        random.Random(seed).shuffle(tasks)
        return tasks
    missing = [t.id for t in tasks if t.difficulty is None]
    if missing:
        raise InvalidStream(f"tasks without difficulty under {ordering.value}: {missing[:5]}")
    # sorted() is stable, so ties keep file order in both directions
    if ordering is Ordering.EASY_TO_HARD:
        return sorted(tasks, key=lambda t: t.difficulty)
    return sorted(tasks, key=lambda t: -t.difficulty)


@dataclass
class TaskResult:
    task_id: str
    task_input: str
    env: str
    prediction: str
    feedback: Feedback
    steps_taken: int
    backend_calls: int
    retrieved_ids: list[int] = field(default_factory=list)
    pruned_ids: list[int] = field(default_factory=list)
    memory_size_after: int = 0
    wall_time: float = 0.0
    malformed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["feedback"] = self.feedback.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TaskResult:
        d = dict(d)
        d["feedback"] = Feedback.from_dict(d["feedback"])
        return cls(**d)


def load_results(path: str | Path) -> list[TaskResult]:
    with open(path, encoding="utf-8") as f:
        return [TaskResult.from_dict(json.loads(line)) for line in f if line.strip()]


def snapshot_roundtrip(state: MemoryState, path: str | Path) -> MemoryState:
    save_snapshot(state, path)
    return load_snapshot(path)


class StreamRunner:
    """Executes one stream with its own memory state, writing a run directory.

    ``clock`` feeds ``TaskResult.wall_time``; pass a constant clock for
    byte-reproducible result files.
    """

    def __init__(
        self,
        spec: StreamSpec,
        run_dir: str | Path,
        backend: ModelBackend | None = None,
        embedder: Embedder | None = None,
        tasks: Sequence[TaskRecord] | None = None,
        clock: Callable[[], float] = time.perf_counter,
        record_prompts: bool = True,
        resolved_config: dict | None = None,
    ):
        self.spec = spec
        self.run_dir = Path(run_dir)
        self.backend = backend if backend is not None else make_backend(spec.backend)
        self.embedder = embedder if embedder is not None else make_spec_embedder(spec.embedder)
        raw = list(tasks) if tasks is not None else load_tasks(spec.tasks_path)
        self.stream = build_stream(raw, spec.ordering, spec.shuffle_seed)
        self.clock = clock
        self.record_prompts = record_prompts
        self.resolved_config = resolved_config if resolved_config is not None else spec.to_dict()
        self.policy = Policy(spec.policy)
        self.state = MemoryState(self.policy, spec.capacity, spec.ingest_failures)
        self.results: list[TaskResult] = []
        self._pending: list[TaskResult] = []

    # -- persistence -----------------------------------------------------------

    def _write_checkpoint(self) -> None:
        with open(self.run_dir / RESULTS_FILE, "a", encoding="utf-8") as f:
            for r in self._pending:
                f.write(json.dumps(r.to_dict()) + "\n")
        self._pending = []
        save_snapshot(self.state, self.run_dir / SNAPSHOT_FILE)
        ckpt = {"tasks_done": len(self.results)}
        if hasattr(self.backend, "state_dict"):
            ckpt["backend_state"] = self.backend.state_dict()
        tmp = self.run_dir / (CHECKPOINT_FILE + ".tmp")
        tmp.write_text(json.dumps(ckpt), encoding="utf-8")
        tmp.replace(self.run_dir / CHECKPOINT_FILE)

    def _restore(self) -> None:
        ckpt = json.loads((self.run_dir / CHECKPOINT_FILE).read_text(encoding="utf-8"))
        done = int(ckpt["tasks_done"])
        lines = (self.run_dir / RESULTS_FILE).read_text(encoding="utf-8").splitlines(keepends=True)
        if len(lines) < done:
            raise InvalidStream(f"results file has {len(lines)} lines but checkpoint says {done}")
        # results written after the checkpoint are recomputed
        (self.run_dir / RESULTS_FILE).write_text("".join(lines[:done]), encoding="utf-8")
        self.results = [TaskResult.from_dict(json.loads(ln)) for ln in lines[:done]]
        self.state = load_snapshot(self.run_dir / SNAPSHOT_FILE)
        if "backend_state" in ckpt and hasattr(self.backend, "load_state_dict"):
            self.backend.load_state_dict(ckpt["backend_state"])
        logger.info("resuming %s at task %d", self.spec.run_id, done)

    def _start_fresh(self, overwrite: bool = False) -> None:
        if not overwrite and ((self.run_dir / RESULTS_FILE).exists() or (self.run_dir / CHECKPOINT_FILE).exists()):
            raise InvalidStream(f"run directory {self.run_dir} already holds results; use resume")
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / CONFIG_FILE).write_text(json.dumps(self.resolved_config, indent=2) + "\n", encoding="utf-8")
        (self.run_dir / RESULTS_FILE).write_text("", encoding="utf-8")
        save_snapshot(self.state, self.run_dir / SNAPSHOT_FILE)

    # -- execution -------------------------------------------------------------

    def run(self, resume: bool = False, stop_after: int | None = None) -> list[TaskResult]:
        """Run (or resume) the stream.

        ``stop_after`` halts once that many tasks are complete without a final
        flush, which is what an interrupted process leaves behind.
        """
        try:
            if resume and (self.run_dir / CHECKPOINT_FILE).exists():
                self._restore()
            else:
                # resuming before the first checkpoint means starting over
                self._start_fresh(overwrite=resume)
            for index in range(len(self.results), len(self.stream)):
                if stop_after is not None and index >= stop_after:
                    return list(self.results)
                result = self.process(self.stream[index], index)
                self.results.append(result)
                self._pending.append(result)
                if len(self.results) % self.spec.checkpoint_every == 0:
                    self._write_checkpoint()
            self._write_checkpoint()
        except OSError as exc:
            raise StreamAborted(f"stream {self.spec.run_id} aborted: {exc}", self.results) from exc
        return list(self.results)

    def _retrieve(self, query) -> list[int]:
        if self.policy is Policy.BASELINE:
            return []
        if self.policy is Policy.HISTORY:
            return [e.id for e in recent_window(self.state, self.spec.history_window)]
        if self.policy is Policy.EXP_RECENT:
            return [e.id for e in recent_window(self.state, self.spec.retrieval.k)]
        return [s.entry_id for s in top_k(self.state, query, self.spec.retrieval)]

    def _prompt_recorder(self, index: int) -> Callable[[str], None]:
        counter = [0]

        def record(prompt: str) -> None:
            counter[0] += 1
            if self.record_prompts:
                d = self.run_dir / PROMPTS_DIR
                d.mkdir(exist_ok=True)
                (d / f"{index:05d}-{counter[0]:03d}.txt").write_text(prompt, encoding="utf-8")

        record.count = counter  # type: ignore[attr-defined]
        return record

    def _mode(self, task: TaskRecord) -> PromptMode:
        if self.spec.agent.mode != "auto":
            return PromptMode(self.spec.agent.mode)
        return PromptMode.SINGLE_TURN if task.env is EnvKind.SINGLE_TURN_QA else PromptMode.MULTI_TURN

    def process(self, task: TaskRecord, index: int) -> TaskResult:
        t0 = self.clock()
        query = self.embedder.embed(task.input)
        retrieved = self._retrieve(query)
        record = self._prompt_recorder(index)
        entries = {e.id: e for e in self.state.entries}
        texts = [entries[i].rendered for i in retrieved]
        budget = self.spec.agent.prompt_budget
        state = self.state
        pruned: list[int] = []
        malformed = 0

        if task.env is EnvKind.SINGLE_TURN_QA:
            steps = 1
            try:
                if self.policy is Policy.REMEM:
                    out = run_step(
                        task.input, state, self.backend, self.spec.agent,
                        working_set=retrieved, instructions=QA_INSTRUCTIONS, on_prompt=record,
                    )
                    prediction, state = out.payload, out.state
                    pruned, malformed = out.pruned_ids, out.malformed
                else:
                    prediction = synthesize(
                        task.input, texts, self.backend, self._mode(task),
                        instructions=QA_INSTRUCTIONS, budget=budget, on_prompt=record,
                    )
                feedback = grade_single_turn(prediction, task.expected)
            except BackendError as exc:
                logger.warning("task %s ungraded: %s", task.id, exc)
                prediction, feedback = "", Feedback.ungraded(str(exc))
        else:
            carry = {"step": AgentStepState.start(task.input, retrieved, self.spec.agent.max_ops), "state": state}

            def agent_step(history: list[str]) -> str:
                nonlocal malformed
                if self.policy is Policy.REMEM:
                    out = run_step(
                        task.input, carry["state"], self.backend, self.spec.agent,
                        working_set=carry["step"], history=history,
                        instructions=KEYDOOR_INSTRUCTIONS, demonstrations=KEYDOOR_DEMONSTRATIONS, on_prompt=record,
                    )
                    carry["step"], carry["state"] = out.step, out.state
                    pruned.extend(out.pruned_ids)
                    malformed += out.malformed
                    return out.payload
                return synthesize(
                    task.input, texts, self.backend, self._mode(task), history=history,
                    instructions=KEYDOOR_INSTRUCTIONS, demonstrations=KEYDOOR_DEMONSTRATIONS,
                    budget=budget, on_prompt=record,
                )

            outcome = run_episode(task, agent_step, self.spec.step_cap)
            state = carry["state"]
            steps, feedback = outcome.steps_taken, outcome.feedback
            prediction = "; ".join(a for a, _ in outcome.transcript)

        if feedback.graded:
            if feedback.outcome is Outcome.SUCCESS:
                kept = [i for i in retrieved if i not in set(pruned)]
                state = adjust_utility(state, kept, +1)
            state = evolve(state, task.input, prediction, feedback, query, step=index)
        self.state = state
        return TaskResult(
            task_id=task.id,
            task_input=task.input,
            env=task.env.value,
            prediction=prediction,
            feedback=feedback,
            steps_taken=steps,
            backend_calls=record.count[0],
            retrieved_ids=list(retrieved),
            pruned_ids=list(pruned),
            memory_size_after=len(state.entries),
            wall_time=self.clock() - t0,
            malformed=malformed,
        )


def run_stream(
    spec: StreamSpec,
    run_dir: str | Path,
    backend: ModelBackend | None = None,
    *,
    resume: bool = False,
    stop_after: int | None = None,
    **kwargs,
) -> list[TaskResult]:
    return StreamRunner(spec, run_dir, backend, **kwargs).run(resume=resume, stop_after=stop_after)
