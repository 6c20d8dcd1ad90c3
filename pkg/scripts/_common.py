"""Small helpers shared by the experiment scripts."""

import tempfile
from pathlib import Path

from evomem.config import StreamSpec
from evomem.harness import StreamRunner


def stream_spec(policy, run_id=None, **kw):
    return StreamSpec(run_id=run_id or policy, tasks_path="inline", policy=policy, **kw)


def out_root(path):
    if path:
        Path(path).mkdir(parents=True, exist_ok=True)
        return Path(path)
    return Path(tempfile.mkdtemp(prefix="evomem-"))


def run_policy(root, s, backend, tasks):
    return StreamRunner(s, root / s.run_id, backend, tasks=tasks).run()
