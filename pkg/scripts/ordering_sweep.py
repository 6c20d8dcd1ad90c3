"""Sensitivity of a policy to task order: run one stream under several orderings."""

import argparse

from evomem.environments import TaskRecord
from evomem.metrics import compute_report, robustness_spread
from evomem.scripted_policies import qa_reuse_backend

from _common import out_root, run_policy, stream_spec


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--policy", default="exprag")
    ap.add_argument("--questions", type=int, default=15)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--out", help="directory for run dirs (default: a temp dir)")
    args = ap.parse_args(argv)

    pairs = [(f"Which code opens locker {i}?", f"code-{i * 13 % 97}") for i in range(args.questions)]
    tasks = [
        TaskRecord(f"l{i}-{rep}", q, a, difficulty=float(i % 5 + 1))
        for rep in range(2)
        for i, (q, a) in enumerate(pairs)
    ]
    orderings = ["given", "easy_to_hard", "hard_to_easy"] + [f"shuffled:{s}" for s in args.seeds]
    root = out_root(args.out)
    reports = []
    for ordering in orderings:
        run_id = f"{args.policy}-{ordering.replace(':', '-')}"
        s = stream_spec(args.policy, run_id=run_id, ordering=ordering, ingest_failures=True)
        rep = compute_report(run_policy(root, s, qa_reuse_backend(pairs), tasks))
        reports.append((ordering, rep))
        print(f"{ordering:<14} S={rep.success_rate:.3f} P={rep.progress_rate:.3f}")
    print(f"spread S={robustness_spread(reports):.3f} P={robustness_spread(reports, 'progress_rate'):.3f}")
    print(f"run dirs under {root}")


if __name__ == "__main__":
    main()
