"""Run-level metrics: success/progress rates, step efficiency, curves, pruning, robustness."""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .errors import EmptyReport, InvalidInput, UndefinedCorrelation
from .memory import Outcome
from .retrieval import task_similarity_profile

ROLLING_WINDOW = 10


@dataclass
class RunReport:
    run_id: str
    n_tasks: int
    n_graded: int
    accuracy: float | None
    success_rate: float
    progress_rate: float
    avg_steps: float
    cumulative_curve: list[tuple[int, float]]
    rolling_curve: list[tuple[int, float]]
    pruning: dict = field(default_factory=dict)
    similarity_profile: float | None = None
    robustness: dict = field(default_factory=lambda: {"orderings": [], "spread": 0.0})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cumulative_curve"] = [list(p) for p in self.cumulative_curve]
        d["rolling_curve"] = [list(p) for p in self.rolling_curve]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        d = dict(d)
        d["cumulative_curve"] = [tuple(p) for p in d["cumulative_curve"]]
        d["rolling_curve"] = [tuple(p) for p in d["rolling_curve"]]
        return cls(**d)


def running_mean(values: Sequence[float]) -> list[float]:
    out, total = [], 0.0
    for t, v in enumerate(values, start=1):
        total += v
        out.append(total / t)
    return out


def rolling_mean(values: Sequence[float], window: int = ROLLING_WINDOW) -> list[float]:
    if window < 1:
        raise InvalidInput("window must be >= 1")
    out, total = [], 0.0
    for t, v in enumerate(values):
        total += v
        if t >= window:
            total -= values[t - window]
        out.append(total / min(t + 1, window))
    return out


def compute_report(results, embeddings=(), run_id: str = "", window: int = ROLLING_WINDOW) -> RunReport:
    """Aggregate a stream's task results.

    Rates use graded tasks only; ungraded tasks still count toward steps.
    Step efficiency averages multi-turn tasks when there are any, otherwise
    all tasks. The cumulative curve is indexed by position among graded tasks.
    """
    results = list(results)
    graded = [r for r in results if r.feedback.outcome is not Outcome.UNGRADED]
    if not graded:
        raise EmptyReport("no graded tasks to report on")
    wins = [1.0 if r.feedback.outcome is Outcome.SUCCESS else 0.0 for r in graded]
    qa = [w for r, w in zip(graded, wins) if r.env == "single_turn_qa"]
    multi = [r for r in results if r.env != "single_turn_qa"]
    step_pool = multi or results

    pruned = sum(len(r.pruned_ids) for r in results)
    retained = sum(len(r.retrieved_ids) for r in results) - pruned
    cumulative = running_mean(wins)
    rolling = rolling_mean(wins, window)

    return RunReport(
        run_id=run_id,
        n_tasks=len(results),
        n_graded=len(graded),
        accuracy=sum(qa) / len(qa) if qa else None,
        success_rate=sum(wins) / len(wins),
        progress_rate=sum(r.feedback.progress for r in graded) / len(graded),
        avg_steps=sum(r.steps_taken for r in step_pool) / len(step_pool),
        cumulative_curve=[(t, v) for t, v in enumerate(cumulative, start=1)],
        rolling_curve=[(t, v) for t, v in enumerate(rolling, start=1)],
        pruning={"pruned": pruned, "retained": retained, "rate": pruned / max(1, pruned + retained)},
        similarity_profile=task_similarity_profile(embeddings) if len(embeddings) else None,
    )


METRICS: dict[str, Callable[[RunReport], float]] = {
    "success_rate": lambda r: r.success_rate,
    "progress_rate": lambda r: r.progress_rate,
    "accuracy": lambda r: r.accuracy,
    "avg_steps": lambda r: r.avg_steps,
}


def robustness_spread(reports: Sequence[tuple[str, RunReport]], metric: str | Callable[[RunReport], float] = "success_rate") -> float:
    """max - min of one metric across orderings; each report's robustness field is filled in."""
    if len(reports) < 2:
        raise InvalidInput("robustness needs at least two orderings")
    select = METRICS[metric] if isinstance(metric, str) else metric
    values = [(name, select(rep)) for name, rep in reports]
    if any(v is None for _, v in values):
        raise InvalidInput("selected metric is undefined for some report")
    spread = max(v for _, v in values) - min(v for _, v in values)
    for _, rep in reports:
        rep.robustness = {"orderings": [list(p) for p in values], "spread": spread}
    return spread


def correlate(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation coefficient."""
    if len(x) != len(y) or len(x) < 2:
        raise InvalidInput("correlate needs two equal-length sequences of length >= 2")
    try:
        return statistics.correlation(x, y)
    except statistics.StatisticsError as exc:
        raise UndefinedCorrelation(str(exc)) from None


CSV_FIELDS = [
    "kind", "t", "task_id", "success", "progress", "steps", "cumulative", "rolling",
    "accuracy", "success_rate", "progress_rate", "avg_steps", "pruning_rate",
]


def write_report(report: RunReport, results, out_dir: str | Path) -> None:
    """Write report.json, report.csv (per-task rows + summary row) and curve.csv."""
    out = Path(out_dir)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    graded = [r for r in results if r.feedback.outcome is not Outcome.UNGRADED]
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r, (t, cum), (_, roll) in zip(graded, report.cumulative_curve, report.rolling_curve):
            w.writerow({
                "kind": "task", "t": t, "task_id": r.task_id,
                "success": int(r.feedback.outcome is Outcome.SUCCESS),
                "progress": r.feedback.progress, "steps": r.steps_taken,
                "cumulative": cum, "rolling": roll,
            })
        w.writerow({
            "kind": "summary", "t": report.n_graded,
            "accuracy": "" if report.accuracy is None else report.accuracy,
            "success_rate": report.success_rate, "progress_rate": report.progress_rate,
            "avg_steps": report.avg_steps, "pruning_rate": report.pruning["rate"],
        })
    with open(out / "curve.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["t", "cumulative", "rolling"])
        for (t, cum), (_, roll) in zip(report.cumulative_curve, report.rolling_curve):
            w.writerow([t, cum, roll])


def load_report(path: str | Path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
