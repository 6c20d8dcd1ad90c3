"""Exit criteria. Run alone with ``pytest tests/test_acceptance.py -v``.

Each test carries ``@pytest.mark.acceptance(n, title)``; the terminal summary
prints one PASS/FAIL line per criterion.
"""

import json
import os
import random
import re
import time
from pathlib import Path

import numpy as np
import pytest

from evomem.agent import Act, AgentConfig, Prune, parse_operation, run_step
from evomem.backends import CallableBackend, ScriptedBackend
from evomem.config import Ordering, StreamSpec
from evomem.environments import TaskRecord, keydoor_task
from evomem.errors import InvalidPrune, MalformedOperation
from evomem.harness import PROMPTS_DIR, RESULTS_FILE, SNAPSHOT_FILE, StreamRunner, TaskResult, build_stream
from evomem.memory import (
    Feedback,
    MemoryEntry,
    MemoryState,
    Outcome,
    Policy,
    adjust_utility,
    evolve,
    load_snapshot,
    render_experience,
    save_snapshot,
)
from evomem.metrics import compute_report, correlate, robustness_spread
from evomem.retrieval import HashEmbedder, RetrievalConfig, top_k
from evomem.scripted_policies import keydoor_backend, qa_reuse_backend

from conftest import random_units
from oracles import BulkScanOracle

GOLDEN = Path(__file__).parent / "golden"
REGEN = os.environ.get("EVOMEM_REGEN_GOLDEN") == "1"


def report_line(n, ok, detail):
    print(f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}")


def stream_spec(policy, **kw):
    return StreamSpec(run_id=kw.pop("run_id", policy), tasks_path="unused", policy=policy, **kw)


def run(tmp_path, name, s, backend, tasks, **kw):
    runner = StreamRunner(s, tmp_path / name, backend, tasks=tasks, **kw)
    return runner.run(), runner


def constant_clock():
    return 0.0


# -- 1 -------------------------------------------------------------------------


def _bulk_memory(rng, n, dim, next_id):
    vecs = random_units(rng, n, dim)
    # duplicate a few rows so exact ties are exercised
    dup = rng.random(n) < 0.05
    if n > 1:
        vecs[dup] = vecs[rng.integers(0, n, int(dup.sum()))]
    fails = rng.random(n) < 0.3
    inactive = rng.random(n) < 0.05
    entries = []
    for i in range(n):
        fb = Feedback.failure() if fails[i] else Feedback.success()
        entries.append(
            MemoryEntry(next_id + i, f"t{i}", "p", fb, "r", tuple(vecs[i].tolist()), i, active=not inactive[i])
        )
    return MemoryState(Policy.EXPRAG, ingest_failures=True, entries=tuple(entries))


@pytest.mark.acceptance(1, "retrieval oracle equivalence")
def test_criterion_01_retrieval_oracle():
    rng = np.random.default_rng(20240601)
    dim = 32
    start = time.perf_counter()
    checked = 0
    for m in range(200):
        n = int(rng.integers(1, 2001))
        state = _bulk_memory(rng, n, dim, next_id=int(rng.integers(1, 50)))
        exclude = bool(m % 2)
        oracle = BulkScanOracle(state.entries, exclude_failures=exclude)
        queries = random_units(rng, 50, dim)
        # some queries sit exactly on a stored vector
        queries[:5] = [state.entries[int(j)].embedding for j in rng.integers(0, n, 5)]
        for q in queries:
            k = int(rng.integers(1, 11))
            got = top_k(state, q, RetrievalConfig(k=k, exclude_failures=exclude))
            want = oracle.top_k(q, k)
            assert [h.entry_id for h in got] == [i for i, _ in want]
            assert np.allclose([h.score for h in got], [s for _, s in want], atol=1e-9, rtol=0)
            checked += 1
    elapsed = time.perf_counter() - start
    report_line(1, elapsed < 30, f"{checked} queries matched the brute-force scan in {elapsed:.1f}s")
    assert elapsed < 30


# -- 2 -------------------------------------------------------------------------


QA_PAIRS = [(f"What is the secret word of vault {i}?", f"token-{i * 7}") for i in range(20)]


@pytest.mark.acceptance(2, "experience-reuse witness")
def test_criterion_02_experience_reuse(tmp_path):
    start = time.perf_counter()
    tasks = [TaskRecord(f"v{i}-{rep}", q, a) for rep in range(2) for i, (q, a) in enumerate(QA_PAIRS)]
    res_rag, _ = run(tmp_path, "rag", stream_spec("exprag", ingest_failures=True), qa_reuse_backend(QA_PAIRS), tasks)
    res_base, _ = run(tmp_path, "base", stream_spec("baseline", ingest_failures=True), qa_reuse_backend(QA_PAIRS), tasks)
    rag, base = compute_report(res_rag), compute_report(res_base)
    second = [r.feedback.outcome is Outcome.SUCCESS for r in res_rag[20:]]
    curve = [v for _, v in rag.cumulative_curve]
    elapsed = time.perf_counter() - start

    ok = (
        rag.accuracy >= 0.5
        and all(second)
        and all(v == 0.0 for _, v in base.cumulative_curve)
        and base.accuracy == 0.0
        and all(a <= b for a, b in zip(curve[19:], curve[20:]))
        and elapsed < 10
    )
    report_line(
        2, ok,
        f"ExpRAG acc={rag.accuracy:.2f} second-occurrence={sum(second) / len(second):.2f} "
        f"Baseline acc={base.accuracy:.2f} in {elapsed:.2f}s",
    )
    assert rag.accuracy >= 0.5
    assert sum(second) / len(second) == 1.0
    assert base.accuracy == 0.0 and all(v == 0.0 for _, v in base.cumulative_curve)
    assert all(a <= b for a, b in zip(curve[19:], curve[20:]))
    assert elapsed < 10


# -- 3 -------------------------------------------------------------------------


@pytest.mark.acceptance(3, "step-efficiency direction")
def test_criterion_03_step_efficiency(tmp_path):
    start = time.perf_counter()
    tasks = [keydoor_task(i % 5, 6, task_id=f"ep{i}") for i in range(20)]
    res_base, _ = run(tmp_path, "base", stream_spec("baseline"), keydoor_backend(), tasks)
    res_rag, _ = run(tmp_path, "rag", stream_spec("exprag"), keydoor_backend(), tasks)
    base_steps = compute_report(res_base).avg_steps
    rag_steps = compute_report(res_rag).avg_steps
    reduction = 1 - rag_steps / base_steps
    elapsed = time.perf_counter() - start
    ok = reduction >= 0.20 and elapsed < 20
    report_line(3, ok, f"mean steps Baseline={base_steps:.2f} ExpRAG={rag_steps:.2f} reduction={reduction:.1%}")
    assert reduction >= 0.20
    assert elapsed < 20


# -- 4 -------------------------------------------------------------------------

_LABEL = re.compile(r"\[Experience #(\d+)\]")


def _trace_backend(rnd):
    def reply(prompt):
        m = max([int(x) for x in _LABEL.findall(prompt)] or [0])
        kind = rnd.random()
        if kind < 0.25:
            return "Action: " + rnd.choice(["go hall", "take key", "42"])
        if kind < 0.5:
            return "Think: " + rnd.choice(["consider", "look again"])
        if kind < 0.8:
            hi = max(1, m + rnd.choice([0, 0, 0, 1]))  # occasionally out of range
            lo = rnd.randint(1, hi)
            return f"Think-Prune: {lo}-{rnd.randint(lo, hi)}" if rnd.random() < 0.5 else f"Think-Prune: {lo},{hi}"
        return rnd.choice(["", "nonsense", "Prune 1", "Action"])

    return reply


@pytest.mark.acceptance(4, "ReMem loop invariants")
def test_criterion_04_loop_invariants():
    start = time.perf_counter()
    base = MemoryState(Policy.REMEM, ingest_failures=True)
    emb = HashEmbedder(32)
    for i in range(8):
        base = evolve(base, f"task {i}", f"pred {i}", Feedback.success(), emb.embed(f"task {i}"), step=i)
    prunes = 0
    for seed in range(1000):
        rnd = random.Random(seed)
        max_ops = rnd.randint(1, 8)
        ws = rnd.sample(range(1, 9), rnd.randint(0, 6))
        prompts = []
        out = run_step(
            "current task", base, CallableBackend(_trace_backend(rnd)), AgentConfig(max_ops=max_ops),
            working_set=ws, on_prompt=prompts.append,
        )
        acts = [i for i, op in enumerate(out.trace) if isinstance(op, Act)]
        assert acts == [len(out.trace) - 1], f"seed {seed}: trace {out.trace}"
        assert len(out.trace) <= max_ops
        assert out.backend_calls <= max_ops + 1
        sizes = []
        for p in prompts:
            labels = [int(x) for x in _LABEL.findall(p)]
            assert labels == list(range(1, len(labels) + 1)), f"seed {seed}: labels {labels}"
            sizes.append(len(labels))
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))
        assert [i for i, _ in out.step.working_set] == list(range(1, len(out.step.working_set) + 1))
        assert len(out.step.working_set) == len(ws) - len(out.pruned_ids)
        prunes += sum(isinstance(op, Prune) for op in out.trace)
    elapsed = time.perf_counter() - start
    report_line(4, elapsed < 10, f"1000 traces ({prunes} prunes) kept all invariants in {elapsed:.2f}s")
    assert prunes > 100
    assert elapsed < 10


# -- 5 -------------------------------------------------------------------------

ACCEPT = [
    ("1,3", {1, 3}),
    ("2-4", {2, 3, 4}),
    ("1,3-5", {1, 3, 4, 5}),
    ("5", {5}),
    ("3-3", {3}),
    ("1-5", {1, 2, 3, 4, 5}),
    ("4,2", {2, 4}),
    ("1, 2", {1, 2}),
    ("2 - 3", {2, 3}),
    ("1,1", {1}),
    ("1-3,2-4", {1, 2, 3, 4}),
]
REJECT_MALFORMED = ["0", "abc", "", "0-2", "3-1", "1-", "-1", "1,,2", "1;2", "2.0", "one", "1 2", "+1"]
REJECT_RANGE = ["6", "1,6", "4-6", "1,3-7", "100"]


@pytest.mark.acceptance(5, "prune grammar")
def test_criterion_05_prune_grammar():
    failures = []
    for spec_text, want in ACCEPT:
        for prefix in ("Think-Prune: ", "think-prune:", "THINK-PRUNE:  "):
            try:
                op = parse_operation(prefix + spec_text, limit=5)
            except MalformedOperation as exc:
                failures.append((prefix + spec_text, repr(exc)))
                continue
            if op != Prune(frozenset(want)):
                failures.append((prefix + spec_text, op))
    for spec_text in REJECT_MALFORMED:
        try:
            parse_operation("Think-Prune: " + spec_text, limit=5)
            failures.append((spec_text, "accepted"))
        except InvalidPrune:
            failures.append((spec_text, "range error instead of grammar error"))
        except MalformedOperation:
            pass
    for spec_text in REJECT_RANGE:
        try:
            parse_operation("Think-Prune: " + spec_text, limit=5)
            failures.append((spec_text, "accepted"))
        except InvalidPrune:
            pass
    total = 3 * len(ACCEPT) + len(REJECT_MALFORMED) + len(REJECT_RANGE)
    report_line(5, not failures, f"{total - len(failures)}/{total} table rows behaved")
    assert failures == []


# -- 6 -------------------------------------------------------------------------


def _order_free_backend(answers):
    # answers from a fixed table and ignores memory, so order cannot matter
    def reply(prompt):
        q = re.search(r"^Question: (.*)$", prompt, re.MULTILINE).group(1)
        return f"Final Answer: {answers.get(q, 'pass')}"

    return CallableBackend(reply)


@pytest.mark.acceptance(6, "ordering machinery")
def test_criterion_06_ordering(tmp_path):
    rng = random.Random(6)
    tasks = [TaskRecord(f"o{i:03d}", f"Ordering question {i}?", f"a{i}", float(rng.randint(1, 5))) for i in range(100)]
    easy = build_stream(tasks, Ordering.EASY_TO_HARD)
    hard = build_stream(tasks, Ordering.HARD_TO_EASY)
    pos = {t.id: i for i, t in enumerate(tasks)}
    want_easy = sorted(tasks, key=lambda t: (t.difficulty, pos[t.id]))
    want_hard = sorted(tasks, key=lambda t: (-t.difficulty, pos[t.id]))
    assert easy == want_easy and hard == want_hard
    assert build_stream(tasks, Ordering.SHUFFLED, 1) == build_stream(tasks, Ordering.SHUFFLED, 1)
    assert build_stream(tasks, Ordering.SHUFFLED, 1) != build_stream(tasks, Ordering.SHUFFLED, 2)

    answers = {t.input: (t.expected if i % 2 else "wrong") for i, t in enumerate(tasks)}
    reports = []
    for name, ordering in (("given", "given"), ("shuffled(1)", "shuffled:1"), ("shuffled(2)", "shuffled:2")):
        s = stream_spec("exprag", run_id=name.replace("(", "-").rstrip(")"), ordering=ordering, ingest_failures=True)
        res, _ = run(tmp_path, s.run_id, s, _order_free_backend(answers), tasks, record_prompts=False)
        reports.append((name, compute_report(res)))
    spread_s = robustness_spread(reports, "success_rate")
    spread_p = robustness_spread(reports, "progress_rate")
    report_line(6, spread_s == spread_p == 0.0, f"stable sorts exact; spread S={spread_s} P={spread_p}")
    assert spread_s == 0.0 and spread_p == 0.0


# -- 7 -------------------------------------------------------------------------

TOPICS = ["rivers", "planets", "metals", "birds", "poets"]


def _mixed_tasks():
    return [
        TaskRecord(f"m{i}", f"Name item {i} in the catalogue of {TOPICS[i % 5]}.", f"item-{i}")
        for i in range(50)
    ]


def _mixed_backend():
    def reply(prompt):
        q = re.search(r"^Question: Name item (\d+) ", prompt, re.MULTILINE)
        i = int(q.group(1))
        return f"Final Answer: item-{i}" if i % 3 else "Final Answer: not sure"

    return CallableBackend(reply)


@pytest.mark.acceptance(7, "failure-ingestion flag")
def test_criterion_07_failure_flags(tmp_path):
    tasks = _mixed_tasks()
    emb = HashEmbedder()

    res, runner = run(tmp_path, "in", stream_spec("exprag", ingest_failures=True), _mixed_backend(), tasks)
    stored = load_snapshot(tmp_path / "in" / SNAPSHOT_FILE)
    n_fail = sum(r.feedback.outcome is Outcome.FAILURE for r in res)
    stored_fail = [e for e in stored.entries if e.feedback.outcome is Outcome.FAILURE]
    assert 0 < n_fail < 50 and len(stored_fail) == n_fail
    # each stored failure is retrievable by its own task (hash buckets can
    # collide, making two inputs tie exactly, so look a few deep)
    for e in stored_fail:
        hits = top_k(stored, emb.embed(e.task_input), RetrievalConfig(k=3))
        assert e.id in [h.entry_id for h in hits]
    fail_ids = {e.id for e in stored_fail}
    assert any(set(r.retrieved_ids) & fail_ids for r in res)

    s = stream_spec("exprag", run_id="excl", ingest_failures=True, retrieval=RetrievalConfig(exclude_failures=True))
    res_x, _ = run(tmp_path, "excl", s, _mixed_backend(), tasks)
    stored_x = load_snapshot(tmp_path / "excl" / SNAPSHOT_FILE)
    fail_x = {e.id for e in stored_x.entries if e.feedback.outcome is Outcome.FAILURE}
    assert fail_x
    assert all(not (set(r.retrieved_ids) & fail_x) for r in res_x)
    for t in tasks:
        hits = top_k(stored_x, emb.embed(t.input), RetrievalConfig(k=50, exclude_failures=True))
        assert not {h.entry_id for h in hits} & fail_x

    res_n, _ = run(tmp_path, "noin", stream_spec("exprag", run_id="noin", ingest_failures=False), _mixed_backend(), tasks)
    stored_n = load_snapshot(tmp_path / "noin" / SNAPSHOT_FILE)
    assert all(e.feedback.outcome is Outcome.SUCCESS for e in stored_n.entries)
    assert len(stored_n.entries) == sum(r.feedback.outcome is Outcome.SUCCESS for r in res_n)
    report_line(7, True, f"{n_fail} failures stored and retrievable; excluded on request; never stored when off")


# -- 8 -------------------------------------------------------------------------

STREAM_RULES = {
    "rules": [
        {"match": {"contains": "[Experience #4]"}, "responses": ["Think-Prune: 4", "Think-Prune: 2-3", "Think: keep all"]},
        {"match": {"contains": "Correctness: success"}, "responses": ["Think: a similar task worked", "Action: word1", "Action: go kitchen"]},
        {"match": {"always": None}, "responses": ["Action: word2", "Think: unsure", "no prefix", "Action: word0", "Action: take key"]},
    ]
}
GOLDEN_PROMPTS = ["00000-001.txt", "00017-002.txt", "00045-001.txt"]


def _stream_tasks():
    tasks = []
    for i in range(60):
        if i % 10 == 7:
            tasks.append(keydoor_task(i // 10, 4, task_id=f"kd{i}"))
        else:
            tasks.append(TaskRecord(f"qa{i}", f"What is the code word number {i % 9}?", f"word{i % 9}"))
    return tasks


@pytest.mark.acceptance(8, "determinism and resume")
def test_criterion_08_resume(tmp_path):
    rules = tmp_path / "rules.json"
    rules.write_text(json.dumps(STREAM_RULES))
    s = stream_spec("remem", ingest_failures=True, step_cap=6, checkpoint_every=10)

    def go(name, **kw):
        backend = ScriptedBackend.from_file(rules)
        return StreamRunner(s, tmp_path / name, backend, tasks=_stream_tasks(), clock=constant_clock).run(**kw)

    go("full")
    go("cut", stop_after=30)
    go("cut", resume=True)
    go("cut37", stop_after=37)
    go("cut37", resume=True)

    full = tmp_path / "full"
    for other in ("cut", "cut37"):
        for name in (RESULTS_FILE, SNAPSHOT_FILE):
            assert (tmp_path / other / name).read_bytes() == (full / name).read_bytes(), (other, name)
    prompts = {p.name: p.read_bytes() for p in (full / PROMPTS_DIR).iterdir()}
    resumed = {p.name: p.read_bytes() for p in (tmp_path / "cut" / PROMPTS_DIR).iterdir()}
    assert prompts == resumed

    results = [json.loads(line) for line in (full / RESULTS_FILE).read_text().splitlines()]
    assert len(results) == 60
    assert any(r["pruned_ids"] for r in results) and any(r["malformed"] for r in results)

    for name in GOLDEN_PROMPTS:
        text = (full / PROMPTS_DIR / name).read_text(encoding="utf-8")
        path = GOLDEN / "remem_stream" / name
        if REGEN:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        assert text == path.read_text(encoding="utf-8"), name
    report_line(8, True, "resumed runs at 30 and 37 are byte-identical; prompts match goldens")


# -- 9 -------------------------------------------------------------------------


def _res(fb, steps, retrieved, pruned):
    return TaskResult("t", "x", "keydoor", "y", fb, steps, steps, list(range(retrieved)), list(range(pruned)))


@pytest.mark.acceptance(9, "metric identities")
def test_criterion_09_metrics():
    rs = [
        _res(Feedback.success(), 6, 0, 0),
        _res(Feedback.failure(0.75), 30, 2, 1),
        _res(Feedback.ungraded("timeout"), 4, 1, 0),
        _res(Feedback.failure(0.5), 30, 3, 0),
        _res(Feedback.success(), 9, 4, 2),
        _res(Feedback.failure(0.0), 30, 4, 1),
    ]
    rep = compute_report(rs)
    # graded: wins 1,0,0,1,0; progress 1, .75, .5, 1, 0
    assert rep.success_rate == pytest.approx(2 / 5, abs=1e-9)
    assert rep.progress_rate == pytest.approx(3.25 / 5, abs=1e-9)
    assert rep.avg_steps == pytest.approx(109 / 6, abs=1e-9)
    assert rep.pruning["pruned"] == 4 and rep.pruning["retained"] == 10
    assert rep.pruning["rate"] == pytest.approx(4 / 14, abs=1e-9)
    want_curve = [1.0, 1 / 2, 1 / 3, 2 / 4, 2 / 5]
    assert [t for t, _ in rep.cumulative_curve] == [1, 2, 3, 4, 5]
    assert all(abs(v - w) <= 1e-9 for (_, v), w in zip(rep.cumulative_curve, want_curve))

    x = [1.0, 2.0, 3.0, 4.0, 5.0]
    assert abs(correlate(x, [2 * v + 1 for v in x]) - 1.0) <= 1e-9
    assert abs(correlate(x, [-v for v in x]) + 1.0) <= 1e-9
    assert abs(correlate([1, 2, 3], [1, 3, 2]) - 0.5) <= 1e-9
    report_line(9, True, "S, P, avg_steps, pruning rate, curve and Pearson match hand values")


# -- 10 ------------------------------------------------------------------------


@pytest.mark.acceptance(10, "snapshot round-trip")
def test_criterion_10_snapshot(tmp_path):
    rng = np.random.default_rng(10)
    state = MemoryState(Policy.REMEM, capacity=None, ingest_failures=True)
    vecs = random_units(rng, 500, 48)
    for i, v in enumerate(vecs):
        fb = Feedback.failure(float(rng.random()) * 0.9) if rng.random() < 0.3 else Feedback.success()
        state = evolve(state, f"task {i} é中 \"quoted\"\n", render_experience("g", "p", fb), fb, v, step=i)
    state = adjust_utility(state, [int(i) for i in rng.integers(1, 501, 60)], -1, deactivate_at=-1)
    state = adjust_utility(state, [int(i) for i in rng.integers(1, 501, 60)], +2)
    assert 0 < state.active_count < 500
    save_snapshot(state, tmp_path / "mem.jsonl")
    loaded = load_snapshot(tmp_path / "mem.jsonl")
    assert loaded == state
    for q in random_units(rng, 20, 48):
        for cfg in (RetrievalConfig(k=8), RetrievalConfig(k=25, exclude_failures=True)):
            assert top_k(loaded, q, cfg) == top_k(state, q, cfg)
    report_line(10, True, "500-entry snapshot reloads equal; 20 queries give identical top-k")
