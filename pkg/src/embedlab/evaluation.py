"""Ranking, correlation, clustering and classification metrics, plus the
task harnesses that turn an encoder into metric rows."""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, DomainError
from .transforms import binarize, binary_similarity_matrix, truncate

log = logging.getLogger(__name__)

Qrels = Mapping[str, Mapping[str, float]]
Ranking = Mapping[str, Sequence[str]]


# ---------------------------------------------------------------- ranking metrics


def judged_queries(qrels: Qrels) -> list[str]:
    """Queries with at least one relevant (grade > 0) document."""
    return sorted(q for q, rels in qrels.items() if any(g > 0 for g in rels.values()))


def _dcg(gains: Sequence[float]) -> float:
    return sum((2.0 ** g - 1.0) / math.log2(r + 2) for r, g in enumerate(gains))


def ndcg_at_k(ranking: Ranking, qrels: Qrels, k: int = 10, per_query: bool = False):
    """Mean nDCG@k with gain ``2^rel - 1`` over queries that have relevant
    documents.  Queries without any are skipped (see :func:`judged_queries`)."""
    if k < 1:
        raise DomainError("k must be >= 1")
    scores = {}
    for q in judged_queries(qrels):
        rels = qrels[q]
        ranked = list(ranking.get(q, ()))[:k]
        dcg = _dcg([rels.get(d, 0) for d in ranked])
        ideal = _dcg(sorted((g for g in rels.values() if g > 0), reverse=True)[:k])
        scores[q] = dcg / ideal
    if per_query:
        return scores
    return float(np.mean(list(scores.values()))) if scores else 0.0


def map_at_k(ranking: Ranking, qrels: Qrels, k: int = 1000, per_query: bool = False):
    """Mean average precision over the top ``k``; relevance is grade > 0 and
    each query's sum of precisions is divided by its number of relevant docs."""
    if k < 1:
        raise DomainError("k must be >= 1")
    scores = {}
    for q in judged_queries(qrels):
        relevant = {d for d, g in qrels[q].items() if g > 0}
        hits, total = 0, 0.0
        for r, d in enumerate(list(ranking.get(q, ()))[:k], 1):
            if d in relevant:
                hits += 1
                total += hits / r
        scores[q] = total / len(relevant)
    if per_query:
        return scores
    return float(np.mean(list(scores.values()))) if scores else 0.0


def chance_ndcg_at_k(qrels: Qrels, corpus_size: int, k: int = 10) -> float:
    """Expected nDCG@k of a uniformly random ranking of ``corpus_size`` docs.

    By linearity each document lands at every rank with probability 1/N.
    """
    mean_discount = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, corpus_size) + 1)) / corpus_size
    vals = []
    for q in judged_queries(qrels):
        gains = [g for g in qrels[q].values() if g > 0]
        expected = sum(2.0 ** g - 1.0 for g in gains) * mean_discount
        vals.append(expected / _dcg(sorted(gains, reverse=True)[:k]))
    return float(np.mean(vals)) if vals else 0.0


def rank_documents(scores: np.ndarray, doc_ids: Sequence[str], k: int | None = None) -> list[list[str]]:
    """Rows of ``scores`` (queries x docs) to id lists: descending score,
    ties broken by ascending doc id."""
    doc_ids = np.asarray(doc_ids)
    id_rank = np.argsort(np.argsort(doc_ids, kind="stable"), kind="stable")
    out = []
    for row in np.atleast_2d(scores):
        order = np.lexsort((id_rank, -row))
        if k is not None:
            order = order[:k]
        out.append(doc_ids[order].tolist())
    return out


# ---------------------------------------------------------------- correlation / clustering


def spearman(pred: Sequence[float], gold: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    pred = np.asarray(pred, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.float64)
    if pred.shape != gold.shape or pred.size < 2:
        raise ContractError("spearman needs two equal-length sequences of length >= 2")
    rp, rg = rankdata(pred), rankdata(gold)
    rp -= rp.mean()
    rg -= rg.mean()
    denom = math.sqrt(float((rp * rp).sum() * (rg * rg).sum()))
    if denom == 0:
        raise DomainError("correlation undefined for a constant sequence")
    return float(np.clip((rp * rg).sum() / denom, -1.0, 1.0))


def _entropy(counts: np.ndarray) -> float:
    n = counts.sum()
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def homogeneity_completeness_v(labels: Sequence, clusters: Sequence) -> tuple[float, float, float]:
    labels = np.asarray(labels)
    clusters = np.asarray(clusters)
    if labels.size == 0 or labels.shape != clusters.shape:
        raise DomainError("v-measure needs two non-empty sequences of equal length")
    _, li = np.unique(labels, return_inverse=True)
    _, ki = np.unique(clusters, return_inverse=True)
    table = np.zeros((li.max() + 1, ki.max() + 1))
    np.add.at(table, (li, ki), 1)
    n = table.sum()
    h_c = _entropy(table.sum(axis=1))
    h_k = _entropy(table.sum(axis=0))
    nz = table > 0
    joint = table[nz] / n
    # H(C|K) and H(K|C) from the joint distribution
    h_c_given_k = float(-(joint * np.log(table[nz] / table.sum(axis=0)[np.nonzero(nz)[1]])).sum())
    h_k_given_c = float(-(joint * np.log(table[nz] / table.sum(axis=1)[np.nonzero(nz)[0]])).sum())
    h = 1.0 if h_c == 0 else 1.0 - h_c_given_k / h_c
    c = 1.0 if h_k == 0 else 1.0 - h_k_given_c / h_k
    v = 0.0 if h + c == 0 else 2.0 * h * c / (h + c)
    return h, c, v


def v_measure(labels: Sequence, clusters: Sequence) -> float:
    """Harmonic mean of homogeneity and completeness."""
    return homogeneity_completeness_v(labels, clusters)[2]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norm == 0, 1.0, norm)


def classify_accuracy(train_emb, train_labels, test_emb, test_labels) -> float:
    """Nearest-centroid (cosine) accuracy; unseen test labels count as misses."""
    train_emb = _unit_rows(train_emb)
    test_emb = _unit_rows(test_emb)
    train_labels = np.asarray(train_labels)
    classes = np.unique(train_labels)
    if classes.size == 0:
        raise DomainError("classification needs at least one training example")
    centroids = _unit_rows(np.stack([train_emb[train_labels == c].mean(axis=0) for c in classes]))
    pred = classes[np.argmax(test_emb @ centroids.T, axis=1)]
    test_labels = np.asarray(test_labels)
    unseen = ~np.isin(test_labels, classes)
    if unseen.any():
        log.warning("%d test examples carry labels absent from training", int(unseen.sum()))
    return float(np.mean(pred == test_labels))


# ---------------------------------------------------------------- encoders for the harness

Encoder = Callable[[Sequence[str], str], np.ndarray]


def _text_seed(text: str, salt: int) -> int:
    return zlib.crc32(text.encode("utf-8")) ^ salt


class IdentityOracleEncoder:
    """Equal texts map to equal random unit vectors, regardless of role."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim, self.seed = dim, seed

    def __call__(self, texts, role) -> np.ndarray:
        return _unit_rows(np.stack([
            np.random.default_rng([_text_seed(t, 0), self.seed]).standard_normal(self.dim) for t in texts
        ]))


class RandomEncoder:
    """Independent random unit vectors per (text, role): a chance baseline."""

    def __init__(self, dim: int = 32, seed: int = 0):
        self.dim, self.seed = dim, seed

    def __call__(self, texts, role) -> np.ndarray:
        salt = 1 if str(role).lower().endswith("query") else 2
        return _unit_rows(np.stack([
            np.random.default_rng([_text_seed(t, salt), self.seed]).standard_normal(self.dim) for t in texts
        ]))


# ---------------------------------------------------------------- harnesses


@dataclass(frozen=True)
class MetricRow:
    task: str
    dim: int
    precision: str
    metric: str
    value: float

    def to_dict(self) -> dict:
        return {"task": self.task, "dim": self.dim, "precision": self.precision,
                "metric": self.metric, "value": self.value}


def retrieval_scores(query_emb: np.ndarray, doc_emb: np.ndarray, dim: int | None = None,
                     binary: bool = False) -> np.ndarray:
    if dim is not None:
        query_emb, doc_emb = truncate(query_emb, dim), truncate(doc_emb, dim)
    if binary:
        return binary_similarity_matrix(binarize(query_emb), binarize(doc_emb))
    return _unit_rows(query_emb) @ _unit_rows(doc_emb).T


def retrieval_harness(encoder: Encoder, queries: Mapping[str, str], corpus: Mapping[str, str], qrels: Qrels,
                      dims: Sequence[int] | None = None, binary: bool = False, k: int = 10,
                      task: str = "retrieval", map_k: int = 1000,
                      embeddings: tuple[np.ndarray, np.ndarray] | None = None) -> list[MetricRow]:
    """Encode with query/document roles, score exhaustively and report
    nDCG@k and MAP for each requested dimension, full precision and (if
    ``binary``) binary."""
    missing = [q for q in qrels if q not in queries]
    stray = {d for rels in qrels.values() for d in rels if d not in corpus}
    if missing or stray:
        raise ContractError(f"qrels reference unknown ids: {sorted(missing)[:3]} {sorted(stray)[:3]}")
    qids, dids = sorted(queries), sorted(corpus)
    if embeddings is None:
        q_emb = encoder([queries[q] for q in qids], "query")
        d_emb = encoder([corpus[d] for d in dids], "document")
    else:
        q_emb, d_emb = embeddings
    full = q_emb.shape[1]
    rows = []
    for dim in (dims or [full]):
        for precision in (["full", "binary"] if binary else ["full"]):
            scores = retrieval_scores(q_emb, d_emb, dim, precision == "binary")
            ranking = dict(zip(qids, rank_documents(scores, dids, k=max(k, map_k))))
            rows.append(MetricRow(task, dim, precision, f"ndcg@{k}", ndcg_at_k(ranking, qrels, k)))
            rows.append(MetricRow(task, dim, precision, f"map@{map_k}", map_at_k(ranking, qrels, map_k)))
    excluded = len(qrels) - len(judged_queries(qrels))
    if excluded:
        log.info("%d queries without relevant documents excluded", excluded)
    return rows


def sts_harness(encoder: Encoder, pairs: Sequence[dict]) -> MetricRow:
    a = encoder([p["a"] for p in pairs], "document")
    b = encoder([p["b"] for p in pairs], "document")
    sims = (_unit_rows(a) * _unit_rows(b)).sum(axis=1)
    return MetricRow("sts", a.shape[1], "full", "spearman", spearman(sims, [p["score"] for p in pairs]))


def clustering_harness(encoder: Encoder, docs: Sequence[dict], seed: int = 0) -> MetricRow:
    from sklearn.cluster import KMeans

    emb = _unit_rows(encoder([d["text"] for d in docs], "document"))
    labels = [d["label"] for d in docs]
    k = len(set(labels))
    clusters = KMeans(n_clusters=k, n_init=4, random_state=seed).fit_predict(emb)
    return MetricRow("clustering", emb.shape[1], "full", "v_measure", v_measure(labels, clusters))


def classification_harness(encoder: Encoder, train: Sequence[dict], test: Sequence[dict]) -> MetricRow:
    tr = encoder([d["text"] for d in train], "document")
    te = encoder([d["text"] for d in test], "document")
    acc = classify_accuracy(tr, [d["label"] for d in train], te, [d["label"] for d in test])
    return MetricRow("classification", tr.shape[1], "full", "accuracy", acc)


# ---------------------------------------------------------------- TSV files


def write_qrels(path, qrels: Qrels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in sorted(qrels):
            for d in sorted(qrels[q]):
                fh.write(f"{q}\t{d}\t{qrels[q][d]:g}\n")


def read_qrels(path) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                q, d, g = line.split()
                if d in out.setdefault(q, {}):
                    raise ContractError(f"duplicate judgement for {q}/{d}")
                out[q][d] = float(g)
    return out


def write_run(path, scores: Mapping[str, Mapping[str, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in sorted(scores):
            for d, s in sorted(scores[q].items(), key=lambda kv: (-kv[1], kv[0])):
                fh.write(f"{q}\t{d}\t{s:.8g}\n")


def read_run(path) -> dict[str, list[str]]:
    """Run file to a ranking (descending score, ties by doc id)."""
    raw: dict[str, list[tuple[float, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                q, d, s = line.split()
                raw.setdefault(q, []).append((-float(s), d))
    return {q: [d for _, d in sorted(v)] for q, v in raw.items()}
