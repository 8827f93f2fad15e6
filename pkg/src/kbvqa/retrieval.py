"""Exhaustive cosine-similarity retrieval over entry image embeddings.

The index is flat: every search scores all entries with a float64-accumulated
dot product on normalized float32 rows, so results are exact and reproducible
across chunked or parallel execution. Ties are broken by ascending ingestion
ordinal.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import EvalError, IngestError
from .kb import KnowledgeBase, Query

DEFAULT_TOP_K = 5


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked hits for one query: (entry_id, score) pairs, best first."""

    query_id: str
    hits: tuple[tuple[str, float], ...]
    k: int

    def entry_ids(self) -> list[str]:
        return [entry_id for entry_id, _ in self.hits]

    def to_json_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "k": self.k,
            "hits": [
                {"entry_id": entry_id, "score": float(f"{score:.9g}")}
                for entry_id, score in self.hits
            ],
        }


class FlatIndex:
    """Immutable exhaustive index; safe for concurrent search calls."""

    def __init__(self, entry_ids: list[str], matrix: np.ndarray):
        self.entry_ids = entry_ids
        self._matrix = matrix.astype(np.float64)

    def __len__(self) -> int:
        return len(self.entry_ids)

    @property
    def dim(self) -> int:
        return self._matrix.shape[1] if self._matrix.size else 0

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def scores(self, query_vector: np.ndarray) -> np.ndarray:
        return self._matrix @ query_vector


def build_index(kb: KnowledgeBase) -> FlatIndex:
    """Index every entry's embedding row, in ingestion order.

    All entries must have a bound embedding_row and the KB must have its
    normalized matrix attached.
    """
    if len(kb) == 0:
        return FlatIndex([], np.zeros((0, int(kb.manifest["dim"])), dtype=np.float32))
    unbound = [e.entry_id for e in kb.entries if e.embedding_row is None]
    if unbound:
        raise IngestError(f"entries without embedding_row: {', '.join(unbound)}")
    if kb.embeddings is None:
        raise IngestError("knowledge base has no embedding matrix attached")
    if not kb.embeddings.normalized:
        raise IngestError("embedding matrix must be normalized before indexing")
    rows = np.array([e.embedding_row for e in kb.entries], dtype=np.int64)
    matrix = kb.embeddings.data[rows]
    return FlatIndex([e.entry_id for e in kb.entries], matrix)


def search(index: FlatIndex, query_embedding: np.ndarray, k: int, query_id: str = "") -> RetrievalResult:
    """Top-k entries by cosine similarity (dot product on normalized vectors).

    The query vector is L2-normalized here if it is not already. Ties are
    broken by ascending ingestion ordinal.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    q = np.asarray(query_embedding, dtype=np.float64).reshape(-1)
    if len(index) == 0:
        return RetrievalResult(query_id=query_id, hits=(), k=k)
    if q.shape[0] != index.dim:
        raise ValueError(f"query dim {q.shape[0]} does not match index dim {index.dim}")
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        raise ValueError("query embedding has zero norm")
    if abs(norm - 1.0) > 1e-6:
        q = q / norm
    scores = index.scores(q)
    n = min(k, len(index))
    # stable sort on negated scores = descending score, ascending ordinal on ties
    order = np.argsort(-scores, kind="stable")[:n]
    hits = tuple((index.entry_ids[i], float(scores[i])) for i in order)
    return RetrievalResult(query_id=query_id, hits=hits, k=k)


def search_batch(
    index: FlatIndex,
    query_vectors: Sequence[np.ndarray],
    query_ids: Sequence[str],
    k: int,
    workers: int = 1,
) -> list[RetrievalResult]:
    """Search many queries; output order always equals input order."""
    if len(query_vectors) != len(query_ids):
        raise ValueError("query_vectors and query_ids must have equal length")
    if workers <= 1 or len(query_vectors) <= 1:
        return [search(index, v, k, qid) for v, qid in zip(query_vectors, query_ids)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda pair: search(index, pair[0], k, pair[1]),
                             zip(query_vectors, query_ids)))


def ranked_urls(result: RetrievalResult, url_of: Callable[[str], str] | Mapping[str, str],
                dedup: bool = True) -> list[str]:
    """Hit URLs in rank order, optionally collapsed to first occurrence per URL."""
    getter = url_of.__getitem__ if isinstance(url_of, Mapping) else url_of
    urls: list[str] = []
    seen: set[str] = set()
    for entry_id in result.entry_ids():
        url = getter(entry_id)
        if dedup:
            if url in seen:
                continue
            seen.add(url)
        urls.append(url)
    return urls


def gold_rank(result: RetrievalResult, gold_url: str,
              url_of: Callable[[str], str] | Mapping[str, str], dedup: bool = True) -> int | None:
    """1-based rank of the gold URL among the hits; None when absent.

    URL comparison is byte-exact, no normalization.
    """
    for rank, url in enumerate(ranked_urls(result, url_of, dedup=dedup), start=1):
        if url == gold_url:
            return rank
    return None


def recall_at_k(
    results: Sequence[RetrievalResult],
    queries: Sequence[Query],
    k: int,
    url_of: Callable[[str], str] | Mapping[str, str],
    dedup: bool = True,
) -> float:
    """Fraction of queries whose gold entry URL appears among the top-k hit URLs."""
    if not results:
        raise EvalError("no retrieval results to score")
    by_id = {r.query_id: r for r in results}
    hit = 0
    for query in queries:
        if not query.gold_entry_url:
            raise EvalError(f"query {query.query_id!r} has no gold_entry_url")
        result = by_id.get(query.query_id)
        if result is None:
            raise EvalError(f"no retrieval result for query {query.query_id!r}")
        rank = gold_rank(result, query.gold_entry_url, url_of, dedup=dedup)
        if rank is not None and rank <= k:
            hit += 1
    return hit / len(queries)


def write_results(results: Sequence[RetrievalResult], path: str | Path) -> int:
    p = Path(path)
    with p.open("w", encoding="utf-8") as fh:
        for result in results:
            fh.write(json.dumps(result.to_json_dict(), ensure_ascii=False) + "\n")
    return len(results)


def read_results(path: str | Path) -> list[RetrievalResult]:
    p = Path(path)
    if not p.exists():
        raise IngestError(f"retrieval results file not found: {p}")
    results: list[RetrievalResult] = []
    with p.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{p}: malformed JSON on line {lineno}: {exc}") from exc
            hits = tuple((h["entry_id"], float(h["score"])) for h in obj["hits"])
            results.append(RetrievalResult(query_id=obj["query_id"], hits=hits, k=int(obj["k"])))
    return results
