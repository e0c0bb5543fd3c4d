"""Seeded synthetic corpora, dataset files and the embedding store.

The synthetic language has four word classes: shared stopwords, query
words (question-style filler that only appears in queries), and per-topic
content blocks.  Topics sit on a ring; each topic's word distribution puts
most of its mass on its own block and the rest on its two ring
neighbours, so adjacent topics share surface vocabulary.  A document has
one topic and a few "focus" words it repeats; a query is a short sample
of its document's focus and topic words plus filler.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DomainError, FormatError
from .tokenizer import SPECIALS, Tokenizer

# ---------------------------------------------------------------- world


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    topics: int = 16
    vocab_size: int = 512
    stopwords: int = 48
    query_words: int = 16
    stopword_mass: float = 0.40
    focus_words: int = 3
    focus_mass: float = 0.25
    own_block_mass: float = 0.75
    doc_len: tuple[int, int] = (16, 32)
    query_len: tuple[int, int] = (4, 8)
    long_doc_len: tuple[int, int] = (96, 192)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d) -> "WorldConfig":
        d = dict(d)
        for k in ("doc_len", "query_len", "long_doc_len"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Text:
    tokens: list[int]
    topic: int
    focus: tuple[int, ...] = ()


class SyntheticWorld:
    """Topic model over the toy vocabulary; all sampling is seeded."""

    def __init__(self, config: WorldConfig = WorldConfig()):
        self.config = c = config
        if c.topics < 2:
            raise DomainError("a world needs at least two topics")
        self.tokenizer = Tokenizer(c.vocab_size)
        first = self.tokenizer.first_word_id
        self.stop_ids = np.arange(first, first + c.stopwords)
        self.query_ids = np.arange(first + c.stopwords, first + c.stopwords + c.query_words)
        content = np.arange(first + c.stopwords + c.query_words, c.vocab_size)
        block = len(content) // c.topics
        if block < c.focus_words + 2:
            raise DomainError("vocabulary too small for this many topics")
        self.blocks = [content[t * block:(t + 1) * block] for t in range(c.topics)]
        rng = np.random.default_rng([c.seed, 0xD47A])
        ranks = np.arange(1, c.stopwords + 1)
        self.stop_p = (1.0 / ranks) / (1.0 / ranks).sum()
        self.topic_vocab: list[np.ndarray] = []
        self.topic_p: list[np.ndarray] = []
        for t in range(c.topics):
            own = rng.dirichlet(np.full(block, 1.0)) * c.own_block_mass
            left = np.full(block, (1 - c.own_block_mass) / 2 / block)
            right = left.copy()
            vocab = np.concatenate([self.blocks[t], self.blocks[(t - 1) % c.topics], self.blocks[(t + 1) % c.topics]])
            p = np.concatenate([own, left, right])
            self.topic_vocab.append(vocab)
            self.topic_p.append(p / p.sum())
        self.block_of = {int(w): t for t, b in enumerate(self.blocks) for w in b}

    # -- primitive samplers

    def adjacent(self, topic: int) -> list[int]:
        T = self.config.topics
        return sorted({(topic - 1) % T, (topic + 1) % T} - {topic})

    def _focus(self, rng, topic: int, k: int) -> tuple[int, ...]:
        own = self.blocks[topic]
        p = self.topic_p[topic][: len(own)]
        return tuple(int(w) for w in rng.choice(own, size=k, replace=False, p=p / p.sum()))

    def document(self, rng, topic: int, length=None, focus=None) -> Text:
        c = self.config
        if focus is None:
            focus = self._focus(rng, topic, c.focus_words)
        L = int(rng.integers(c.doc_len[0], c.doc_len[1] + 1)) if length is None else int(length)
        u = rng.random(L)
        toks = np.where(
            u < c.stopword_mass,
            rng.choice(self.stop_ids, size=L, p=self.stop_p),
            np.where(
                u < c.stopword_mass + c.focus_mass,
                rng.choice(np.asarray(focus), size=L),
                rng.choice(self.topic_vocab[topic], size=L, p=self.topic_p[topic]),
            ),
        )
        return Text([int(t) for t in toks], topic, tuple(focus))

    def query(self, rng, doc: Text, length=None) -> Text:
        """Short query: focus and topic words of ``doc`` plus filler."""
        c = self.config
        L = int(rng.integers(c.query_len[0], c.query_len[1] + 1)) if length is None else int(length)
        u = rng.random(L)
        toks = np.where(
            u < 0.15,
            rng.choice(self.query_ids, size=L),
            np.where(
                u < 0.30,
                rng.choice(self.stop_ids, size=L, p=self.stop_p),
                np.where(
                    u < 0.75,
                    rng.choice(np.asarray(doc.focus), size=L),
                    rng.choice(self.topic_vocab[doc.topic], size=L, p=self.topic_p[doc.topic]),
                ),
            ),
        )
        # at least one focus word so every query is answerable
        toks[int(rng.integers(L))] = rng.choice(np.asarray(doc.focus))
        return Text([int(t) for t in toks], doc.topic, doc.focus)

    def hard_negative(self, rng, doc: Text) -> Text:
        """Document from an adjacent topic that reuses one of ``doc``'s focus words."""
        topic = int(rng.choice(self.adjacent(doc.topic)))
        shared = int(rng.choice(np.asarray(doc.focus)))
        own = [w for w in self._focus(rng, topic, self.config.focus_words) if w != shared]
        return self.document(rng, topic, focus=(shared, *own[: self.config.focus_words - 1]))

    def render(self, text: Text | Sequence[int]) -> str:
        toks = text.tokens if isinstance(text, Text) else text
        return self.tokenizer.decode(toks)

    def topic_log_likelihood(self, tokens: Sequence[int]) -> np.ndarray:
        """Per-topic naive-Bayes log-likelihood of the content tokens."""
        scores = np.zeros(self.config.topics)
        for t in range(self.config.topics):
            lookup = dict(zip(self.topic_vocab[t].tolist(), self.topic_p[t].tolist()))
            scores[t] = sum(np.log(lookup.get(w, 1e-6)) for w in tokens if w in self.block_of)
        return scores


# ---------------------------------------------------------------- generators


def _rng(world: SyntheticWorld, stream: str, seed: int | None) -> np.random.Generator:
    salt = sum((i + 1) * ord(ch) for i, ch in enumerate(stream))
    return np.random.default_rng([world.config.seed, salt, 0 if seed is None else seed])


PAIR_STYLES = ("query", "topical")


def gen_pairs(world: SyntheticWorld, size: int, seed: int | None = None, topics: Sequence[int] | None = None,
              long: bool = False, style: str = "query") -> list[dict]:
    """(query, document) pairs; ``long`` draws documents from the long range.

    ``style="query"`` pairs a document with a query written from it;
    ``style="topical"`` pairs it with a short text on the same topic but
    with its own focus words, so the pair shares a subject, not specifics.
    """
    if size < 1:
        raise DomainError("size must be >= 1")
    if style not in PAIR_STYLES:
        raise DomainError(f"style must be one of {PAIR_STYLES}")
    stream = ("pairs-long" if long else "pairs") + ("" if style == "query" else "-" + style)
    rng = _rng(world, stream, seed)
    pool = list(range(world.config.topics)) if topics is None else list(topics)
    out = []
    for _ in range(size):
        t = int(rng.choice(pool))
        length = int(rng.integers(*world.config.long_doc_len)) if long else None
        d = world.document(rng, t, length=length)
        if style == "query":
            q = world.query(rng, d)
        else:
            q = world.query(rng, world.document(rng, t))
        out.append({"q": world.render(q), "d": world.render(d), "topic": t})
    return out


def gen_retrieval(world: SyntheticWorld, size: int, negatives: int = 2, seed: int | None = None,
                  topics: Sequence[int] | None = None) -> list[dict]:
    """Triplets (query, positive, hard negatives from adjacent topics)."""
    if size < 1:
        raise DomainError("size must be >= 1")
    if world.config.topics < 2:
        raise DomainError("hard negatives need at least two topics")
    rng = _rng(world, "retrieval", seed)
    pool = list(range(world.config.topics)) if topics is None else list(topics)
    out = []
    for _ in range(size):
        t = int(rng.choice(pool))
        d = world.document(rng, t)
        q = world.query(rng, d)
        negs = [world.hard_negative(rng, d) for _ in range(negatives)]
        out.append({
            "q": world.render(q),
            "d_pos": world.render(d),
            "d_negs": [world.render(n) for n in negs],
            "topic": t,
            "neg_topics": [n.topic for n in negs],
        })
    return out


def gen_scored_pairs(world: SyntheticWorld, size: int, seed: int | None = None) -> list[dict]:
    """Pairs scored 0-5 by the fraction of tokens ``b`` keeps from ``a``.

    Replaced tokens come from a document of a non-adjacent topic, so a
    keep-fraction of 0 yields a disjoint-topic text and 1 an identical one.
    """
    if size < 1:
        raise DomainError("size must be >= 1")
    rng = _rng(world, "scored", seed)
    T = world.config.topics
    out = []
    for _ in range(size):
        t = int(rng.integers(T))
        far = [u for u in range(T) if u != t and u not in world.adjacent(t)] or [u for u in range(T) if u != t]
        a = world.document(rng, t)
        other = world.document(rng, int(rng.choice(far)), length=len(a.tokens))
        r = rng.random()
        keep_p = 0.0 if r < 0.1 else 1.0 if r < 0.2 else rng.random()
        keep = rng.random(len(a.tokens)) < keep_p
        b = [x if k else y for x, y, k in zip(a.tokens, other.tokens, keep)]
        score = 5.0 * keep.mean()
        out.append({"a": world.render(a), "b": world.render(b), "score": float(score), "topic": t})
    return out


def gen_class_tuples(world: SyntheticWorld, size: int, seed: int | None = None) -> list[dict]:
    """Anchor, same-label positive and seven negatives with distinct other labels."""
    T = world.config.topics
    if T < 8:
        raise DomainError("class tuples need at least 8 topics (labels)")
    if size < 1:
        raise DomainError("size must be >= 1")
    rng = _rng(world, "class", seed)
    out = []
    for _ in range(size):
        label = int(rng.integers(T))
        others = rng.choice([u for u in range(T) if u != label], size=7, replace=False)
        out.append({
            "anchor": world.render(world.document(rng, label)),
            "positive": world.render(world.document(rng, label)),
            "negatives": [world.render(world.document(rng, int(u))) for u in others],
            "label": label,
            "negative_labels": [int(u) for u in others],
        })
    return out


def gen_labeled_docs(world: SyntheticWorld, size: int, seed: int | None = None) -> list[dict]:
    rng = _rng(world, "labeled", seed)
    T = world.config.topics
    return [{"text": world.render(world.document(rng, i % T)), "label": i % T} for i in range(size)]


# ---------------------------------------------------------------- evaluation sets


@dataclass
class RetrievalBenchmark:
    queries: dict[str, str]
    corpus: dict[str, str]
    qrels: dict[str, dict[str, int]]


def build_retrieval_benchmark(world: SyntheticWorld, queries: int = 200, negatives: int = 2,
                              distractors: int = 200, seed: int = 10_000) -> RetrievalBenchmark:
    """Held-out benchmark: each query has one relevant document; the corpus
    also holds every query's hard negatives and random distractors."""
    trip = gen_retrieval(world, queries, negatives=negatives, seed=seed)
    rng = _rng(world, "distractors", seed)
    texts = []
    for rec in trip:
        texts.append(rec["d_pos"])
        texts.extend(rec["d_negs"])
    texts.extend(world.render(world.document(rng, int(rng.integers(world.config.topics))))
                 for _ in range(distractors))
    # doc ids follow a seeded shuffle so id order carries no relevance signal
    perm = _rng(world, "doc-ids", seed).permutation(len(texts))
    ids = [f"doc{int(k):05d}" for k in perm]
    corpus = dict(zip(ids, texts))
    qs, qrels = {}, {}
    stride = 1 + negatives
    for i, rec in enumerate(trip):
        qid = f"q{i:05d}"
        qs[qid] = rec["q"]
        qrels[qid] = {ids[i * stride]: 1}
    return RetrievalBenchmark(qs, corpus, qrels)


# ---------------------------------------------------------------- JSONL datasets

SCHEMAS = {
    "pairs": {"q": str, "d": str},
    "triplets": {"q": str, "d_pos": str, "d_negs": list},
    "scored": {"a": str, "b": str, "score": (int, float)},
    "class": {"anchor": str, "positive": str, "negatives": list, "label": (int, str)},
}


def validate_record(kind: str, rec: dict) -> None:
    if kind not in SCHEMAS:
        raise ContractError(f"unknown dataset kind {kind!r}")
    for key, typ in SCHEMAS[kind].items():
        if key not in rec:
            raise FormatError(f"{kind} record missing field {key!r}")
        if not isinstance(rec[key], typ):
            raise FormatError(f"{kind} field {key!r} has type {type(rec[key]).__name__}")
    if kind == "class" and len(rec["negatives"]) != 7:
        raise FormatError("class records carry exactly 7 negatives")


def write_jsonl(path, records: Iterable[dict], kind: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            if kind is not None:
                validate_record(kind, rec)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path, kind: str | None = None) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if kind is not None:
                validate_record(kind, rec)
            out.append(rec)
    return out


# ---------------------------------------------------------------- embedding store

STORE_MAGIC = b"EMST"
STORE_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4")}


def write_store(path, embeddings: np.ndarray, ids: Sequence[str]) -> None:
    """Header ``EMST | u32 version | u64 count | u32 dim | u8 dtype`` then
    row-major little-endian float32 rows, then ``u16 len + utf-8`` ids."""
    emb = np.asarray(embeddings, dtype="<f4")
    if emb.ndim != 2:
        emb = emb.reshape(len(ids), -1) if emb.size == 0 else emb
    if emb.shape[0] != len(ids):
        raise ContractError("one id per embedding row is required")
    if len(set(ids)) != len(ids):
        raise ContractError("embedding ids must be unique")
    dim = emb.shape[1] if emb.ndim == 2 else 0
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<IQIB", STORE_VERSION, len(ids), dim, 1))
        fh.write(emb.tobytes(order="C"))
        for i in ids:
            raw = i.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)


def read_store(path) -> tuple[np.ndarray, list[str]]:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != STORE_MAGIC:
        raise FormatError("not an embedding store (bad magic)")
    head = struct.calcsize("<IQIB")
    if len(blob) < 4 + head:
        raise FormatError("truncated store header")
    version, count, dim, code = struct.unpack_from("<IQIB", blob, 4)
    if version != STORE_VERSION:
        raise FormatError(f"unsupported store version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    off = 4 + head
    nbytes = count * dim * 4
    if len(blob) < off + nbytes:
        raise FormatError("truncated store payload")
    emb = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=off).reshape(count, dim).copy()
    off += nbytes
    ids = []
    for _ in range(count):
        if len(blob) < off + 2:
            raise FormatError("truncated id table")
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        if len(blob) < off + n:
            raise FormatError("truncated id table")
        ids.append(blob[off:off + n].decode("utf-8"))
        off += n
    return emb, ids


def iter_batches(records: Sequence, batch_size: int) -> Iterator[Sequence]:
    for s in range(0, len(records), batch_size):
        yield records[s:s + batch_size]


__all__ = [
    "WorldConfig", "SyntheticWorld", "Text", "gen_pairs", "gen_retrieval", "gen_scored_pairs",
    "gen_class_tuples", "gen_labeled_docs", "RetrievalBenchmark", "build_retrieval_benchmark",
    "read_jsonl", "write_jsonl", "validate_record", "write_store", "read_store", "SPECIALS",
]
