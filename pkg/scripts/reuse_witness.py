"""Duplicate-question stream: does memory let the agent reuse what it learned?

Every question appears twice. The scripted model guesses wrong unless a
retrieved experience shows the answer, so any gain on the second pass comes
from memory alone.
"""

import argparse

from evomem.environments import TaskRecord
from evomem.memory import Outcome
from evomem.metrics import compute_report
from evomem.scripted_policies import qa_reuse_backend

from _common import out_root, run_policy, stream_spec


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--questions", type=int, default=20)
    ap.add_argument("--out", help="directory for run dirs (default: a temp dir)")
    args = ap.parse_args(argv)

    pairs = [(f"What is the secret word of vault {i}?", f"token-{i * 7}") for i in range(args.questions)]
    tasks = [TaskRecord(f"v{i}-{rep}", q, a) for rep in range(2) for i, (q, a) in enumerate(pairs)]
    root = out_root(args.out)
    n = len(pairs)
    print(f"{'policy':<10}{'S':>8}{'first pass':>12}{'second pass':>13}")
    for policy in ("baseline", "history", "exp_recent", "exprag", "remem"):
        s = stream_spec(policy, ingest_failures=True)
        results = run_policy(root, s, qa_reuse_backend(pairs), tasks)
        rep = compute_report(results, run_id=policy)
        wins = [r.feedback.outcome is Outcome.SUCCESS for r in results]
        print(f"{policy:<10}{rep.success_rate:>8.3f}{sum(wins[:n]) / n:>12.3f}{sum(wins[n:]) / n:>13.3f}")
    print(f"run dirs under {root}")


if __name__ == "__main__":
    main()
