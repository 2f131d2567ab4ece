"""Gallery indexing, exact cosine ranking, and benchmark metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blobio import read_blob, write_blob
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class GalleryIndex:
    """Row-major matrix of unit-norm gallery embeddings with stable ids."""

    ids: np.ndarray   # (count,) int64
    embs: np.ndarray  # (count, d) float64, rows unit-norm

    def __post_init__(self):
        if len(self.ids) != len(self.embs):
            raise ConfigError("id/embedding count mismatch")
        if len(set(int(i) for i in self.ids)) != len(self.ids):
            raise ConfigError("duplicate gallery ids")
        norms = np.linalg.norm(self.embs, axis=1)
        if len(norms) and np.abs(norms - 1.0).max() > 1e-6:
            raise ConfigError("gallery rows must be unit-norm")

    def __len__(self):
        return len(self.ids)

    def save(self, stem: str, meta: dict | None = None) -> str:
        m = dict(meta or {})
        m.update(kind="gallery", ids=[int(i) for i in self.ids])
        return write_blob(stem, {"embs": self.embs}, m)

    @classmethod
    def load(cls, path: str) -> "GalleryIndex":
        meta, tensors = read_blob(path)
        if meta.get("kind") != "gallery":
            raise InputError(f"{path} is not a gallery")
        return cls(ids=np.array(meta["ids"], dtype=np.int64),
                   embs=tensors["embs"].astype(np.float64))


@dataclass(frozen=True)
class QueryResult:
    query_id: int
    ranked_ids: np.ndarray
    scores: np.ndarray


def rank(query_emb: np.ndarray, gallery: GalleryIndex,
         k: int | None = None, query_id: int = -1) -> QueryResult:
    """Exact cosine ranking with deterministic ascending-id tie-break."""
    q = np.asarray(query_emb, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise InputError("zero-norm query embedding")
    scores = gallery.embs @ (q / norm)
    order = np.lexsort((gallery.ids, -scores))
    if k is not None:
        order = order[:k]
    return QueryResult(query_id=query_id,
                       ranked_ids=gallery.ids[order],
                       scores=scores[order])


def _check_truth(result: QueryResult, truth_ids) -> None:
    present = set(int(i) for i in result.ranked_ids)
    for t in truth_ids:
        if int(t) not in present:
            raise InputError(f"truth id {t} missing from ranking")


def recall_at_k(results: list, truths: list, k: int) -> float:
    """Fraction of queries whose target appears in the top k."""
    hits = 0
    for res, truth in zip(results, truths, strict=True):
        _check_truth(res, [truth])
        hits += int(truth) in set(int(i) for i in res.ranked_ids[:k])
    return hits / len(results)


def recall_subset_at_k(results: list, subsets: list, truths: list,
                       k: int) -> float:
    """Recall@k after restricting each ranking to the query's subset."""
    hits = 0
    for res, subset, truth in zip(results, subsets, truths, strict=True):
        if int(truth) not in set(int(i) for i in subset):
            raise InputError(f"subset does not contain truth id {truth}")
        _check_truth(res, subset)
        keep = set(int(i) for i in subset)
        restricted = [int(i) for i in res.ranked_ids if int(i) in keep]
        hits += int(truth) in restricted[:k]
    return hits / len(results)


def average_precision_at_k(result: QueryResult, truth_ids, k: int) -> float:
    targets = set(int(i) for i in truth_ids)
    if not targets:
        raise InputError("empty target set")
    _check_truth(result, targets)
    hits = 0
    ap = 0.0
    for i, rid in enumerate(result.ranked_ids[:k], start=1):
        if int(rid) in targets:
            hits += 1
            ap += hits / i
    return ap / min(k, len(targets))


def map_at_k(results: list, multi_truths: list, k: int) -> float:
    """Mean average precision at cutoff k over multi-target queries."""
    aps = [average_precision_at_k(res, truth, k)
           for res, truth in zip(results, multi_truths, strict=True)]
    return float(np.mean(aps))
