"""Few-shot example retrieval: embeddings, a flat vector index, and
diversity-constrained top-k selection (at most one example per source
database).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import requests

from .dataset import Question

logger = logging.getLogger(__name__)


class RetrievalError(Exception):
    pass


class DimensionMismatchError(RetrievalError):
    pass


class ZeroVectorError(RetrievalError):
    pass


class EmptyIndexError(RetrievalError):
    pass


class EmbedderFailure(RetrievalError):
    """One or more items could not be embedded; message lists which ones."""


@dataclass(eq=False)
class FewShotExample:
    question_id: int
    db_id: str
    question_text: str
    gold_sql: str
    embedding: np.ndarray
    evidence: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.gold_sql:
            raise ValueError(f"example {self.question_id}: gold_sql must be non-empty")
        self.embedding = np.asarray(self.embedding, dtype=np.float64)

    def as_question(self) -> Question:
        return Question(
            id=self.question_id,
            db_id=self.db_id,
            text=self.question_text,
            evidence=self.evidence,
            gold_sql=self.gold_sql,
        )


@dataclass(eq=False)
class EmbeddingIndex:
    dimension: int
    entries: list[FewShotExample]
    embedder_id: str
    _matrix: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.dimension <= 0:
            raise ValueError("dimension must be positive")
        for entry in self.entries:
            if entry.embedding.shape != (self.dimension,):
                raise DimensionMismatchError(
                    f"entry {entry.question_id}: embedding has shape "
                    f"{entry.embedding.shape}, index dimension is {self.dimension}"
                )

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            if self.entries:
                self._matrix = np.stack([e.embedding for e in self.entries])
            else:
                self._matrix = np.zeros((0, self.dimension))
        return self._matrix


# ---------------------------------------------------------------------------
# Embedders
# ---------------------------------------------------------------------------

class Embedder(Protocol):
    embedder_id: str

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return a (len(texts), dimension) float array."""
        ...


class HashEmbedder:
    """Deterministic offline embedder: a unit vector seeded from the text hash.

    Not semantically meaningful; it exists so indexes, runs, and tests are
    reproducible without an embeddings endpoint.
    """

    def __init__(self, dimension: int = 64):
        self.dimension = dimension
        self.embedder_id = f"hash-{dimension}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dimension))
        for i, text in enumerate(texts):
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "big")
            rng = np.random.Generator(np.random.PCG64(seed))
            vec = rng.standard_normal(self.dimension)
            out[i] = vec / np.linalg.norm(vec)
        return out


class HttpEmbedder:
    """Client for an OpenAI-compatible `/v1/embeddings` endpoint."""

    def __init__(
        self,
        model: str,
        base_url: str,
        api_key: Optional[str] = None,
        *,
        batch_size: int = 128,
        timeout_s: float = 120.0,
    ):
        self.model = model
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.batch_size = batch_size
        self.timeout_s = timeout_s
        self.embedder_id = f"openai:{model}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        vectors: list[list[float]] = []
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        for start in range(0, len(texts), self.batch_size):
            batch = list(texts[start : start + self.batch_size])
            response = requests.post(
                f"{self.base_url}/v1/embeddings",
                json={"model": self.model, "input": batch},
                headers=headers,
                timeout=self.timeout_s,
            )
            if response.status_code != 200:
                raise EmbedderFailure(
                    f"embeddings endpoint returned HTTP {response.status_code}: "
                    f"{response.text[:500]}"
                )
            payload = response.json()
            vectors.extend(item["embedding"] for item in payload["data"])
        return np.asarray(vectors, dtype=np.float64)


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------

def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    a_vec = np.asarray(a, dtype=np.float64)
    b_vec = np.asarray(b, dtype=np.float64)
    if a_vec.shape != b_vec.shape:
        raise DimensionMismatchError(f"vector shapes differ: {a_vec.shape} vs {b_vec.shape}")
    norm_a = np.linalg.norm(a_vec)
    norm_b = np.linalg.norm(b_vec)
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVectorError("cosine similarity is undefined for a zero vector")
    return float(np.dot(a_vec, b_vec) / (norm_a * norm_b))


def build_index(
    examples: Sequence[Question],
    embedder: Embedder,
) -> EmbeddingIndex:
    """Embed each example's question text (only the question: no evidence, no
    SQL) and assemble the index. Fails with a per-item report when the
    embedder returns unusable vectors.
    """
    texts = [q.text for q in examples]
    for q in examples:
        if not q.gold_sql:
            raise ValueError(f"question {q.id}: gold SQL required to index examples")
    if texts:
        matrix = np.asarray(embedder.embed(texts), dtype=np.float64)
    else:
        matrix = np.zeros((0, getattr(embedder, "dimension", 0) or 0))
    if matrix.ndim != 2 or matrix.shape[0] != len(texts):
        raise EmbedderFailure(
            f"embedder returned shape {matrix.shape} for {len(texts)} inputs"
        )
    bad = [
        examples[i].id
        for i in range(matrix.shape[0])
        if not np.all(np.isfinite(matrix[i])) or not np.any(matrix[i])
    ]
    if bad:
        raise EmbedderFailure(
            f"embedder produced zero or non-finite vectors for question ids {bad}"
        )
    dimension = matrix.shape[1] if matrix.size else getattr(embedder, "dimension", 0)
    if dimension <= 0:
        raise EmbedderFailure("cannot determine embedding dimension for empty index")
    entries = [
        FewShotExample(
            question_id=q.id,
            db_id=q.db_id,
            question_text=q.text,
            gold_sql=q.gold_sql or "",
            embedding=matrix[i],
            evidence=q.evidence,
        )
        for i, q in enumerate(examples)
    ]
    return EmbeddingIndex(dimension=dimension, entries=entries, embedder_id=embedder.embedder_id)


def select_diverse(
    index: EmbeddingIndex,
    query_embedding: Sequence[float],
    k: int,
    exclude_db: Optional[str] = None,
    *,
    diverse: bool = True,
) -> list[FewShotExample]:
    """Pick up to k examples by descending cosine similarity.

    In diverse mode each source database contributes at most one example.
    Ties break on ascending question_id, so output is fully deterministic.
    Candidates from exclude_db are never returned. Returns fewer than k when
    candidates run out.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not index.entries:
        raise EmptyIndexError("cannot select from an empty index")
    query = np.asarray(query_embedding, dtype=np.float64)
    if query.shape != (index.dimension,):
        raise DimensionMismatchError(
            f"query has shape {query.shape}, index dimension is {index.dimension}"
        )
    query_norm = np.linalg.norm(query)
    if query_norm == 0.0:
        raise ZeroVectorError("query embedding is a zero vector")
    norms = np.linalg.norm(index.matrix, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVectorError("index contains a zero embedding")
    sims = index.matrix @ query / (norms * query_norm)

    order = sorted(range(len(index.entries)), key=lambda i: (-sims[i], index.entries[i].question_id))
    selected: list[FewShotExample] = []
    used_dbs: set[str] = set()
    for i in order:
        entry = index.entries[i]
        if exclude_db is not None and entry.db_id == exclude_db:
            continue
        if diverse and entry.db_id in used_dbs:
            continue
        selected.append(entry)
        used_dbs.add(entry.db_id)
        if len(selected) == k:
            break
    return selected


# ---------------------------------------------------------------------------
# Persistence: single .npz with a float matrix plus a JSON metadata blob
# ---------------------------------------------------------------------------

def save_index(index: EmbeddingIndex, path: Path | str) -> None:
    meta = {
        "embedder_id": index.embedder_id,
        "dimension": index.dimension,
        "entries": [
            {
                "question_id": e.question_id,
                "db_id": e.db_id,
                "question_text": e.question_text,
                "gold_sql": e.gold_sql,
                "evidence": e.evidence,
            }
            for e in index.entries
        ],
    }
    with open(path, "wb") as f:
        np.savez_compressed(
            f,
            embeddings=index.matrix,
            meta=np.frombuffer(json.dumps(meta, ensure_ascii=False).encode("utf-8"), dtype=np.uint8),
        )


def load_index(path: Path | str) -> EmbeddingIndex:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        matrix = np.asarray(data["embeddings"], dtype=np.float64)
    entries = [
        FewShotExample(
            question_id=item["question_id"],
            db_id=item["db_id"],
            question_text=item["question_text"],
            gold_sql=item["gold_sql"],
            embedding=matrix[i],
            evidence=item.get("evidence"),
        )
        for i, item in enumerate(meta["entries"])
    ]
    return EmbeddingIndex(
        dimension=int(meta["dimension"]),
        entries=entries,
        embedder_id=meta["embedder_id"],
    )


def indexes_equal(a: EmbeddingIndex, b: EmbeddingIndex) -> bool:
    if a.dimension != b.dimension or a.embedder_id != b.embedder_id or len(a) != len(b):
        return False
    for ea, eb in zip(a.entries, b.entries):
        if (
            ea.question_id != eb.question_id
            or ea.db_id != eb.db_id
            or ea.question_text != eb.question_text
            or ea.gold_sql != eb.gold_sql
            or ea.evidence != eb.evidence
            or not np.array_equal(ea.embedding, eb.embedding)
        ):
            return False
    return True
