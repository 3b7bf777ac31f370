"""Gallery indexing, cosine search, and retrieval metrics.

The index stores L2-normalized person embeddings with their image ids and
attribute vectors.  Search scores by dot product of normalized vectors and
breaks score ties by ascending image id so rankings are reproducible.
Queries with no relevant gallery item are excluded from the metrics and
counted separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateEmbeddingError


@dataclass(frozen=True)
class RetrievalIndex:
    embeddings: np.ndarray  # (n, dim_vis), unit rows
    ids: tuple
    attrs: np.ndarray  # (n, n_attr) 0/1

    def __post_init__(self):
        self.embeddings.setflags(write=False)
        self.attrs.setflags(write=False)

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def build_index(embeddings: np.ndarray, ids, attrs: np.ndarray) -> RetrievalIndex:
    """Normalize rows and bind metadata; insertion order is preserved."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise ValueError("empty gallery")
    ids = tuple(ids)
    attrs = np.asarray(attrs, dtype=np.int64)
    if len(ids) != emb.shape[0] or attrs.shape[0] != emb.shape[0]:
        raise ValueError(
            f"metadata length mismatch: {emb.shape[0]} embeddings, "
            f"{len(ids)} ids, {attrs.shape[0]} attribute rows"
        )
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if (norms == 0).any():
        raise DegenerateEmbeddingError("zero-norm gallery embedding")
    return RetrievalIndex(embeddings=emb / norms, ids=ids, attrs=attrs)


def relevance(query_attrs, gallery_attrs, subset_match: bool = False) -> bool:
    """Exact attribute equality by default; subset mode only requires every
    active query bit to be active in the gallery item."""
    q = np.asarray(query_attrs, dtype=np.int64)
    g = np.asarray(gallery_attrs, dtype=np.int64)
    if q.shape != g.shape:
        raise ValueError(f"attribute length mismatch: {q.shape} vs {g.shape}")
    if subset_match:
        return bool(np.all(g[q == 1] == 1))
    return bool(np.array_equal(q, g))


@dataclass(frozen=True)
class RankedResult:
    """Full gallery ranking for one query, most similar first."""

    query_id: object
    ranking: tuple  # of (image id, score)
    relevant: tuple  # of bool, aligned with ranking
    k: int

    def topk(self) -> tuple:
        return self.ranking[: self.k]

    @property
    def n_relevant(self) -> int:
        return int(sum(self.relevant))


def search(
    index: RetrievalIndex,
    query_embedding: np.ndarray,
    k: int = 10,
    *,
    query_id=None,
    query_attrs=None,
    subset_match: bool = False,
) -> RankedResult:
    """Rank the whole gallery by cosine similarity to the query.

    Relevance flags are filled when query_attrs is given, otherwise all
    False.  k only affects the topk() view, not the stored ranking.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.asarray(query_embedding, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.embeddings.shape[1]:
        raise ConfigError(
            f"query dim {q.shape[0]} does not match index dim "
            f"{index.embeddings.shape[1]}"
        )
    norm = np.linalg.norm(q)
    if norm == 0:
        raise DegenerateEmbeddingError("zero-norm query embedding")
    scores = index.embeddings @ (q / norm)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))
    if query_attrs is not None:
        flags = tuple(
            relevance(query_attrs, index.attrs[i], subset_match) for i in order
        )
    else:
        flags = tuple(False for _ in order)
    ranking = tuple((index.ids[i], float(scores[i])) for i in order)
    return RankedResult(query_id=query_id, ranking=ranking, relevant=flags, k=k)


def average_precision(flags) -> float:
    """AP over a full ranking: mean of precision@k at each relevant position."""
    flags = [bool(f) for f in flags]
    n_rel = sum(flags)
    if n_rel == 0:
        raise ValueError("average precision undefined with no relevant items")
    hits = 0
    total = 0.0
    for rank, flag in enumerate(flags, start=1):
        if flag:
            hits += 1
            total += hits / rank
    return total / n_rel


def _retained(results) -> list[RankedResult]:
    results = list(results)
    if not results:
        raise ValueError("empty result set")
    kept = [r for r in results if r.n_relevant > 0]
    if not kept:
        raise ValueError("every query has zero relevant gallery items")
    return kept


def metric_map(results) -> float:
    """Mean AP over queries that have at least one relevant item."""
    kept = _retained(results)
    return float(np.mean([average_precision(r.relevant) for r in kept]))


def metric_rank_k(results, k: int) -> float:
    """Fraction of retained queries with a relevant hit in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    kept = _retained(results)
    return float(np.mean([any(r.relevant[:k]) for r in kept]))


def evaluate_retrieval(results) -> dict:
    """The standard retrieval report over a batch of ranked results."""
    results = list(results)
    excluded = sum(1 for r in results if r.n_relevant == 0)
    return {
        "mAP": metric_map(results),
        "R1": metric_rank_k(results, 1),
        "R5": metric_rank_k(results, 5),
        "R10": metric_rank_k(results, 10),
        "excluded_queries": excluded,
        "n_queries": len(results),
    }
