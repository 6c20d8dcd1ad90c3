"""Task embedding and exact top-k experience retrieval."""

from __future__ import annotations

import hashlib
import json
import re
import urllib.request
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import BackendError, InvalidEmbedding, InvalidInput
from .memory import MemoryState, check_unit

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")


class Embedder(Protocol):
    name: str
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]: ...


def _zero_guard(dimension: int) -> np.ndarray:
    v = np.zeros(dimension)
    v[0] = 1.0
    return v


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def _bucket(token: str, dimension: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dimension


@dataclass(frozen=True)
class HashEmbedder:
    """Bag-of-tokens feature hashing into ``dimension`` buckets, L2-normalized.

    Tokens are lowercase alphanumeric runs; each is hashed with 64-bit BLAKE2b.
    Text with no tokens maps to the first basis vector.
    """

    dimension: int = 256
    name: str = "hash"

    def __post_init__(self):
        if self.dimension < 1:
            raise InvalidInput("embedder dimension must be positive")

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            return _zero_guard(self.dimension)
        v = np.zeros(self.dimension)
        for tok in tokens:
            v[_bucket(tok, self.dimension)] += 1.0
        return v / np.linalg.norm(v)

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed(t) for t in texts]


@dataclass
class HttpEmbedder:
    """Client for an external encoder: POST {"texts": [...]} -> {"vectors": [[...]]}."""

    endpoint: str
    dimension: int
    name: str = "http"
    timeout: float = 30.0

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        body = json.dumps({"texts": list(texts)}).encode("utf-8")
        req = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
            vectors = payload["vectors"]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise BackendError(f"embedder request failed: {exc}") from exc
        if len(vectors) != len(texts):
            raise BackendError(f"embedder returned {len(vectors)} vectors for {len(texts)} texts")
        out = []
        for vec in vectors:
            v = np.asarray(vec, dtype=np.float64)
            if v.shape != (self.dimension,):
                raise BackendError(f"embedder returned shape {v.shape}, expected ({self.dimension},)")
            norm = np.linalg.norm(v)
            out.append(v / norm if norm > 0 else _zero_guard(self.dimension))
        return out

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]


def make_embedder(name: str = "hash", dimension: int = 256, endpoint: str | None = None) -> Embedder:
    if name == "hash":
        return HashEmbedder(dimension=dimension)
    if endpoint is None:
        raise InvalidInput(f"embedder {name!r} needs an endpoint")
    return HttpEmbedder(endpoint=endpoint, dimension=dimension, name=name)


def embed(embedder: Embedder, text: str) -> np.ndarray:
    return embedder.embed(text)


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 4
    min_score: float | None = None
    exclude_failures: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInput("retrieval k must be >= 1")
        if self.min_score is not None and not -1.0 <= self.min_score <= 1.0:
            raise InvalidInput("min_score must lie in [-1, 1]")


@dataclass(frozen=True)
class ScoredEntry:
    entry_id: int
    score: float


def top_k(state: MemoryState, query: Sequence[float], cfg: RetrievalConfig = RetrievalConfig()) -> list[ScoredEntry]:
    """Exact cosine top-k over active entries.

    Ordering is score descending, then larger (more recent) id first.
    """
    check_unit(query, "query")
    matrix, ids, active, failed = state._index
    if len(ids) == 0:
        return []
    q = np.asarray(query, dtype=np.float64)
    if matrix.shape[1] != q.shape[0]:
        raise InvalidEmbedding(f"query dimension {q.shape[0]} != memory dimension {matrix.shape[1]}")
    eligible = active & ~failed if cfg.exclude_failures else active
    # row-wise reduction: identical rows get bit-identical scores wherever they sit,
    # which a BLAS matvec does not guarantee
    scores = (matrix * q).sum(axis=1)
    if cfg.min_score is not None:
        eligible = eligible & (scores >= cfg.min_score)
    idx = np.flatnonzero(eligible)
    if idx.size == 0:
        return []
    # lexsort: last key is primary
    order = idx[np.lexsort((-ids[idx], -scores[idx]))][: cfg.k]
    return [ScoredEntry(int(ids[i]), float(scores[i])) for i in order]


def task_similarity_profile(embeddings: Sequence[Sequence[float]]) -> float:
    """Mean cosine distance of each vector to the normalized centroid (lower = more coherent)."""
    if len(embeddings) == 0:
        raise InvalidInput("need at least one embedding")
    m = np.asarray(embeddings, dtype=np.float64)
    centroid = m.mean(axis=0)
    norm = np.linalg.norm(centroid)
    if norm == 0.0:
        # vectors cancel out: no direction is shared
        return 1.0
    c = centroid / norm
    return float(np.mean(1.0 - m @ c))

