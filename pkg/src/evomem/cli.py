"""Command line entry point: run, compare, report, snapshot-inspect."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .config import CliConfig, load_config, parse_override
from .errors import ConfigError, EvoMemError, InvalidInput, StreamAborted
from .harness import CONFIG_FILE, RESULTS_FILE, StreamRunner, load_results
from .memory import load_snapshot
from .metrics import compute_report, write_report
from .retrieval import HashEmbedder, RetrievalConfig, top_k

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ABORTED = 3

logger = logging.getLogger("evomem")


def summary_line(run_id: str, report) -> str:
    return f"{run_id} S={report.success_rate:.4f} P={report.progress_rate:.4f} steps={report.avg_steps:.2f}"


def _fmt(v) -> str:
    if v is None:
        return "-"
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _load_cli_config(path: str, args) -> CliConfig:
    overrides = [parse_override(s) for s in args.set or []]
    if args.ordering:
        overrides.append(("ordering", args.ordering))
    if args.output_dir:
        overrides.append(("output_dir", args.output_dir))
    cfg = load_config(path, overrides)
    if not Path(cfg.stream.tasks_path).is_file():
        raise ConfigError(f"tasks file not found: {cfg.stream.tasks_path}")
    if cfg.stream.backend.rules_path and not Path(cfg.stream.backend.rules_path).is_file():
        raise ConfigError(f"scripted rules file not found: {cfg.stream.backend.rules_path}")
    return cfg


def _run_one(cfg: CliConfig, resume: bool) -> tuple[int, str]:
    run_dir = Path(cfg.output_dir) / cfg.stream.run_id
    try:
        runner = StreamRunner(cfg.stream, run_dir, resolved_config=cfg.to_dict())
    except EvoMemError as exc:
        return EXIT_INVALID, f"error: {exc}"
    try:
        results = runner.run(resume=resume)
    except StreamAborted as exc:
        return EXIT_ABORTED, f"aborted: {exc} ({len(exc.results)} tasks kept)"
    except EvoMemError as exc:
        return EXIT_INVALID, f"error: {exc}"
    embeddings = runner.embedder.embed_many([t.input for t in runner.stream])
    try:
        report = compute_report(results, embeddings, run_id=cfg.stream.run_id)
    except EvoMemError as exc:
        return EXIT_ABORTED, f"aborted: {exc}"
    write_report(report, results, run_dir)
    return EXIT_OK, summary_line(cfg.stream.run_id, report)


def cmd_run(args) -> int:
    try:
        configs = [_load_cli_config(p, args) for p in args.config]
    except EvoMemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=configs[0].log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.parallel > 1 and len(configs) > 1:
        with ThreadPoolExecutor(max_workers=args.parallel) as pool:
            outcomes = list(pool.map(lambda c: _run_one(c, args.resume), configs))
    else:
        outcomes = [_run_one(c, args.resume) for c in configs]
    for code, line in outcomes:
        print(line, file=sys.stdout if code == EXIT_OK else sys.stderr)
    return max(code for code, _ in outcomes)


def _report_for(run_dir: Path):
    results = load_results(run_dir / RESULTS_FILE)
    cfg = json.loads((run_dir / CONFIG_FILE).read_text(encoding="utf-8"))
    emb = cfg.get("embedder", {})
    if emb.get("name", "hash") == "hash":
        embedder = HashEmbedder(dimension=int(emb.get("dimension", 256)))
        embeddings = embedder.embed_many([r.task_input for r in results])
    else:
        embeddings = []
    return results, compute_report(results, embeddings, run_id=cfg.get("run_id", run_dir.name))


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        results, report = _report_for(run_dir)
    except (OSError, ValueError, KeyError, EvoMemError) as exc:
        print(f"error: cannot report on {run_dir}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    write_report(report, results, run_dir)
    print(summary_line(report.run_id, report))
    return EXIT_OK


COMPARE_COLUMNS = ["run_id", "policy", "S", "P", "accuracy", "avg_steps", "n_tasks"]


def cmd_compare(args) -> int:
    if len(args.run_dirs) < 2:
        print("error: compare needs at least two run directories", file=sys.stderr)
        return EXIT_INVALID
    rows = []
    for d in args.run_dirs:
        run_dir = Path(d)
        try:
            _, report = _report_for(run_dir)
            policy = json.loads((run_dir / CONFIG_FILE).read_text(encoding="utf-8")).get("policy", "")
        except (OSError, ValueError, KeyError, EvoMemError) as exc:
            print(f"error: cannot read run directory {run_dir}: {exc}", file=sys.stderr)
            return EXIT_INVALID
        rows.append([report.run_id, policy, report.success_rate, report.progress_rate,
                     report.accuracy, report.avg_steps, report.n_tasks])
    rows.sort(key=lambda r: r[0])
    cells = [COMPARE_COLUMNS] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(COMPARE_COLUMNS))]
    for row in cells:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(COMPARE_COLUMNS)
        w.writerows(["" if v is None else v for v in r] for r in rows)
    return EXIT_OK


def cmd_snapshot_inspect(args) -> int:
    try:
        state = load_snapshot(args.snapshot)
        if not state.entries:
            print("(empty memory)")
            return EXIT_OK
        dim = len(state.entries[0].embedding)
        query = HashEmbedder(dimension=dim).embed(args.query)
        hits = top_k(state, query, RetrievalConfig(k=args.k, exclude_failures=args.exclude_failures))
    except (OSError, EvoMemError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    entries = {e.id: e for e in state.entries}
    for rank, hit in enumerate(hits, start=1):
        e = entries[hit.entry_id]
        print(f"{rank}. id={e.id} score={hit.score:.4f} {e.feedback.outcome.value}: {e.task_input}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evomem", description="Self-evolving memory stream runner.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one or more streams from JSON configs")
    run.add_argument("config", nargs="+")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path config override")
    run.add_argument("--ordering", help="shortcut for --set ordering=...")
    run.add_argument("--output-dir")
    run.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    run.add_argument("--parallel", type=int, default=1, help="run several configs concurrently")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="tabulate metrics across run directories")
    cmp_.add_argument("run_dirs", nargs="*")
    cmp_.add_argument("--out", default="compare.csv")
    cmp_.set_defaults(func=cmd_compare)

    rep = sub.add_parser("report", help="recompute metrics from results.jsonl")
    rep.add_argument("run_dir")
    rep.set_defaults(func=cmd_report)

    ins = sub.add_parser("snapshot-inspect", help="top-k entries of a snapshot for a query")
    ins.add_argument("snapshot")
    ins.add_argument("--query", required=True)
    ins.add_argument("-k", type=int, default=4)
    ins.add_argument("--exclude-failures", action="store_true")
    ins.set_defaults(func=cmd_snapshot_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
