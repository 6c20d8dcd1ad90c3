"""Self-evolving agent memory: experience retrieval, the ReMem step loop, and a streaming evaluation harness."""

from .agent import AgentConfig, build_prompt, parse_operation, run_step, synthesize_exprag
from .backends import CallableBackend, HttpBackend, ScriptedBackend, ScriptedRule
from .environments import KeyDoorWorld, TaskRecord, grade_single_turn, run_episode
from .harness import StreamRunner, TaskResult, build_stream, run_stream
from .memory import Feedback, MemoryEntry, MemoryState, Outcome, Policy, evolve, recent_window, render_experience
from .metrics import RunReport, compute_report, correlate, robustness_spread
from .retrieval import HashEmbedder, RetrievalConfig, ScoredEntry, task_similarity_profile, top_k

__version__ = "0.1.0"
