"""Mean steps to solve KeyDoor episodes with and without experience memory."""

import argparse

from evomem.environments import keydoor_task
from evomem.metrics import compute_report
from evomem.scripted_policies import keydoor_backend

from _common import out_root, run_policy, stream_spec


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rooms", type=int, nargs="+", default=[4, 6])
    ap.add_argument("--episodes", type=int, default=20)
    ap.add_argument("--layouts", type=int, default=5, help="distinct seeds cycled through the stream")
    ap.add_argument("--out", help="directory for run dirs (default: a temp dir)")
    args = ap.parse_args(argv)

    root = out_root(args.out)
    print(f"{'rooms':<7}{'policy':<10}{'S':>7}{'P':>7}{'steps':>8}")
    for rooms in args.rooms:
        tasks = [keydoor_task(i % args.layouts, rooms, task_id=f"kd{rooms}-{i}") for i in range(args.episodes)]
        base_steps = None
        for policy in ("baseline", "exprag", "remem"):
            s = stream_spec(policy, run_id=f"{policy}-r{rooms}")
            rep = compute_report(run_policy(root, s, keydoor_backend(remem=policy == "remem"), tasks))
            if base_steps is None:
                base_steps = rep.avg_steps
                note = ""
            else:
                note = f"  ({rep.avg_steps / base_steps - 1:+.0%} vs baseline)"
            print(f"{rooms:<7}{policy:<10}{rep.success_rate:>7.2f}{rep.progress_rate:>7.2f}{rep.avg_steps:>8.2f}{note}")
    print(f"run dirs under {root}")


if __name__ == "__main__":
    main()
