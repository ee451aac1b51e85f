"""Exact cross-modal retrieval over frozen embeddings, plus F1@K and NDCG@K.

Scores are cosine similarities (dot products of unit vectors). Search is a
full scan: archives here are small and exactness keeps runs reproducible.
Pair-level F1 is the Dice overlap of label sets; NDCG gain is the Jaccard
overlap.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .model import embed
from .data import stack_features


@dataclass
class IndexEntry:
    tuple_id: int
    embedding: np.ndarray
    labels: frozenset


class EmbeddingIndex:
    """Per-modality store of unit-normalized embeddings with labels."""

    def __init__(self, num_modalities, embedding_dim):
        self.num_modalities = num_modalities
        self.embedding_dim = embedding_dim
        self._entries = [[] for _ in range(num_modalities)]
        self._ids = [set() for _ in range(num_modalities)]

    def insert(self, modality, tuple_id, embedding, labels):
        if not 0 <= modality < self.num_modalities:
            raise ContractError(f"unknown modality {modality}")
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.shape != (self.embedding_dim,):
            raise ContractError(
                f"embedding shape {embedding.shape} != ({self.embedding_dim},)")
        if tuple_id in self._ids[modality]:
            raise ContractError(f"duplicate tuple_id {tuple_id} in modality {modality}")
        norm = np.linalg.norm(embedding)
        if norm <= 1e-12:
            raise ContractError(f"zero-norm embedding for tuple {tuple_id}")
        self._ids[modality].add(tuple_id)
        self._entries[modality].append(
            IndexEntry(int(tuple_id), embedding / norm, frozenset(labels)))

    def entries(self, modality):
        return self._entries[modality]

    def size(self, modality):
        return len(self._entries[modality])


@dataclass
class RankedResult:
    query_id: int
    query_modality: int
    target_modality: int
    items: list            # [(tuple_id, score), ...] scores non-increasing
    k: int
    short: bool = False    # fewer candidates than requested


@dataclass
class QueryRow:
    query_id: int
    f1_at_k: float
    ndcg_at_k: float


@dataclass
class MetricsReport:
    src_modality: int
    tgt_modality: int
    k: int
    mean_f1: float
    mean_ndcg: float
    rows: list = field(default_factory=list)

    @property
    def direction(self):
        return f"{self.src_modality}->{self.tgt_modality}"


def build_index(params, ds) -> EmbeddingIndex:
    """Embed every record of the dataset and insert it normalized."""
    if ds.input_dim != params.config.input_dim:
        raise ContractError("dataset and model disagree on input dimension")
    index = EmbeddingIndex(ds.num_modalities, params.config.embedding_dim)
    if not ds.tuples:
        return index
    for m in range(ds.num_modalities):
        z = embed(params, m, stack_features(ds.tuples, m)).data
        for group, row in zip(ds.tuples, z):
            rec = group[m]
            index.insert(m, rec.tuple_id, row, rec.labels)
    return index


def retrieve(index: EmbeddingIndex, query_embedding, target_modality, k,
             exclude_tuple_id=None, query_id=-1, query_modality=-1) -> RankedResult:
    """Exact top-k by cosine score; ties ordered by ascending tuple_id."""
    if k < 1:
        raise ContractError("k must be >= 1")
    if not 0 <= target_modality < index.num_modalities:
        raise ContractError(f"unknown target modality {target_modality}")
    q = np.asarray(query_embedding, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm <= 1e-12:
        raise ContractError("zero-norm query embedding")
    q = q / norm
    candidates = [e for e in index.entries(target_modality)
                  if e.tuple_id != exclude_tuple_id]
    scored = sorted(((float(e.embedding @ q), e.tuple_id) for e in candidates),
                    key=lambda t: (-t[0], t[1]))
    items = [(tid, score) for score, tid in scored[:k]]
    return RankedResult(query_id=query_id, query_modality=query_modality,
                        target_modality=target_modality, items=items, k=k,
                        short=len(items) < k)


def pair_f1(query_labels, item_labels):
    """Dice overlap of two label sets: 2|A & B| / (|A| + |B|)."""
    query_labels = frozenset(query_labels)
    if not query_labels:
        raise ContractError("pair_f1: empty query label set")
    item_labels = frozenset(item_labels)
    if not item_labels:
        return 0.0
    return 2.0 * len(query_labels & item_labels) / (len(query_labels) + len(item_labels))


def jaccard(a, b):
    a, b = frozenset(a), frozenset(b)
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def ndcg_at_k(relevances, k):
    """DCG over the first k positions, normalized by the ideal ordering; 0 if all zero."""
    relevances = list(relevances)
    if not relevances:
        raise ContractError("ndcg_at_k: empty relevance list")
    if any(r < 0 for r in relevances):
        raise ContractError("ndcg_at_k: negative relevance")
    top = relevances[:k]
    dcg = sum(r / math.log2(p + 1) for p, r in enumerate(top, 1))
    ideal = sorted(relevances, reverse=True)[:k]
    idcg = sum(r / math.log2(p + 1) for p, r in enumerate(ideal, 1))
    return dcg / idcg if idcg > 0 else 0.0


def evaluate_cross_modal(params, index: EmbeddingIndex, query_split,
                         src_modality, tgt_modality, k=8,
                         exclude_self_tuple=True) -> MetricsReport:
    """Mean F1@K / NDCG@K over all queries of one retrieval direction.

    Queries are embedded from their src-modality features; candidates come
    from the prebuilt index (normally a different split).
    """
    if src_modality == tgt_modality:
        raise ContractError("cross-modal evaluation needs distinct modalities")
    if not query_split.tuples:
        raise ContractError("empty query set")
    q_embeddings = embed(params, src_modality,
                         stack_features(query_split.tuples, src_modality)).data
    rows = []
    labels_by_id = {e.tuple_id: e.labels for e in index.entries(tgt_modality)}
    for group, q in zip(query_split.tuples, q_embeddings):
        rec = group[src_modality]
        if not rec.labels:
            raise ContractError(f"query tuple {rec.tuple_id} has no labels")
        exclude = rec.tuple_id if exclude_self_tuple else None
        result = retrieve(index, q, tgt_modality, k, exclude_tuple_id=exclude,
                          query_id=rec.tuple_id, query_modality=src_modality)
        f1 = float(np.mean([pair_f1(rec.labels, labels_by_id[tid])
                            for tid, _ in result.items]))
        rel = [jaccard(rec.labels, labels_by_id[tid]) for tid, _ in result.items]
        rows.append(QueryRow(rec.tuple_id, f1, ndcg_at_k(rel, k)))
    return MetricsReport(src_modality=src_modality, tgt_modality=tgt_modality, k=k,
                         mean_f1=float(np.mean([r.f1_at_k for r in rows])),
                         mean_ndcg=float(np.mean([r.ndcg_at_k for r in rows])),
                         rows=rows)


def metrics_to_csv(reports, path):
    """Per-query rows for each direction, then one summary row per direction."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("query_id,direction,f1_at_k,ndcg_at_k\n")
        for rep in reports:
            for row in rep.rows:
                fh.write(f"{row.query_id},{rep.direction},"
                         f"{row.f1_at_k:.17g},{row.ndcg_at_k:.17g}\n")
        for rep in reports:
            fh.write(f"summary,{rep.direction},{rep.mean_f1:.17g},{rep.mean_ndcg:.17g}\n")
        if len(reports) > 1:
            f1 = sum(r.mean_f1 for r in reports) / len(reports)
            ndcg = sum(r.mean_ndcg for r in reports) / len(reports)
            fh.write(f"summary,average,{f1:.17g},{ndcg:.17g}\n")


def summary_table(reports):
    """Small aligned table: one row per direction plus the average."""
    lines = [f"{'direction':<12}{'F1@K':>10}{'NDCG@K':>10}"]
    for rep in reports:
        lines.append(f"{rep.direction:<12}{rep.mean_f1:>10.4f}{rep.mean_ndcg:>10.4f}")
    if len(reports) > 1:
        f1 = sum(r.mean_f1 for r in reports) / len(reports)
        ndcg = sum(r.mean_ndcg for r in reports) / len(reports)
        lines.append(f"{'average':<12}{f1:>10.4f}{ndcg:>10.4f}")
    return "\n".join(lines)
