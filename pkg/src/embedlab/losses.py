"""Training objectives as differentiable scalar functions.

Every function accepts numpy arrays or :class:`~embedlab.numerics.Tensor`
objects and returns a scalar Tensor, so the same code serves training
(through :func:`embedlab.numerics.grad`) and evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DegenerateBatchError, DomainError
from .model import Projection, ProjectionSide, project
from .numerics import Tensor

TAU_MIN, TAU_MAX = 0.005, 1.0


@dataclass
class LossWeights:
    tau: float = 0.02
    tau_prime: float = 0.05
    lambda_nce: float = 1.0
    lambda_d: float = 2.0
    lambda_s: float = 1.0
    lambda_r: float = 20.0
    learnable_tau: bool = True

    def __post_init__(self):
        for name in ("tau", "tau_prime"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda_nce", "lambda_d", "lambda_s", "lambda_r"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def clamp_log_tau(log_tau):
    return np.clip(log_tau, np.log(TAU_MIN), np.log(TAU_MAX))


def tau_from_log(log_tau) -> Tensor:
    """Temperature as a differentiable function of its log-parameter."""
    return nx.exp(nx.as_tensor(log_tau))


# ---------------------------------------------------------------- batches


@dataclass
class PairBatch:
    student_x: object
    student_y: object
    teacher_x: object
    teacher_y: object

    def __post_init__(self):
        sizes = {_rows(self.student_x), _rows(self.student_y), _rows(self.teacher_x), _rows(self.teacher_y)}
        if len(sizes) != 1:
            raise ContractError(f"pair batch members disagree on batch size: {sorted(sizes)}")

    @property
    def size(self) -> int:
        return _rows(self.student_x)


@dataclass
class TripletBatch:
    """Queries, their positives and per-query hard negatives.

    ``negatives`` stacks all mined negatives row-wise; ``negative_owner[k]``
    is the query row that negative ``k`` belongs to.
    """

    queries: object
    positives: object
    negatives: object | None = None
    negative_owner: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if _rows(self.queries) != _rows(self.positives):
            raise ContractError("queries and positives must have equal batch size")
        self.negative_owner = np.asarray(self.negative_owner, dtype=np.int64)
        n_neg = 0 if self.negatives is None else _rows(self.negatives)
        if n_neg != len(self.negative_owner):
            raise ContractError("one owner index per hard negative is required")

    @classmethod
    def from_lists(cls, queries, positives, negative_lists: Sequence[Sequence] | None = None):
        """Build from a per-query list of negative vectors (lists may be empty)."""
        if not negative_lists or all(len(n) == 0 for n in negative_lists):
            return cls(queries, positives)
        owner = np.concatenate([np.full(len(n), i) for i, n in enumerate(negative_lists)]).astype(np.int64)
        rows = [np.asarray(v) for n in negative_lists for v in n]
        return cls(queries, positives, np.stack(rows), owner)

    @property
    def size(self) -> int:
        return _rows(self.queries)


@dataclass
class ScoredPairBatch:
    x: object
    y: object
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not (_rows(self.x) == _rows(self.y) == len(self.scores)):
            raise ContractError("scored pair members disagree on batch size")


@dataclass
class ClassBatch:
    """Per sample: anchor, positive and seven negatives (shape B x 7 x n)."""

    anchors: object
    positives: object
    negatives: object
    teacher: object | None = None  # (9B) x m rows, ordered like :meth:`stacked`

    def __post_init__(self):
        B = _rows(self.anchors)
        if _rows(self.positives) != B or self.negatives.shape[:2] != (B, 7):
            raise ContractError("class batch needs one positive and 7 negatives per anchor")

    @property
    def size(self) -> int:
        return _rows(self.anchors)

    def stacked(self) -> Tensor:
        """All 9B student embeddings: anchors, positives, then negatives."""
        neg = nx.as_tensor(self.negatives)
        flat = neg.reshape(neg.shape[0] * neg.shape[1], neg.shape[2])
        return nx.concat([self.anchors, self.positives, flat], axis=0)


def _rows(x) -> int:
    return int(x.shape[0])


# ---------------------------------------------------------------- objectives


def _tau(tau):
    if isinstance(tau, Tensor):
        return tau
    if tau <= 0:
        raise DomainError("temperature must be positive")
    return float(tau)


def distill_loss(batch: PairBatch, psi: Projection, reduction: str = "sum") -> Tensor:
    """Sum over the batch of cosine distances between projected student and
    teacher embeddings, for both members of each pair."""
    total = None
    for s, t in ((batch.student_x, batch.teacher_x), (batch.student_y, batch.teacher_y)):
        if ProjectionSide(psi.side) is ProjectionSide.STUDENT:
            a, b = project(psi, nx.as_tensor(s)), nx.as_tensor(t)
        else:
            a, b = nx.as_tensor(s), project(psi, nx.as_tensor(t))
        term = nx.tsum(1.0 - nx.rowwise_cosine(a, b))
        total = term if total is None else total + term
    if reduction == "mean":
        return total * (1.0 / batch.size)
    if reduction != "sum":
        raise ContractError(f"unknown reduction {reduction!r}")
    return total


def contrastive(queries, candidates, positive_index: np.ndarray, allowed: np.ndarray, tau) -> Tensor:
    """Mean over queries of ``-log softmax`` of the positive candidate,
    restricted to the ``allowed`` (B x C boolean) candidates per query."""
    tau = _tau(tau)
    logits = nx.cosine_matrix(queries, candidates) / tau
    B = logits.shape[0]
    rows = np.arange(B)
    allowed = allowed.copy()
    allowed[rows, positive_index] = True
    lse = nx.logsumexp(logits, axis=-1, mask=allowed)
    pos = logits[rows, positive_index]
    return nx.tmean(lse - pos)


def info_nce(batch: TripletBatch, tau) -> Tensor:
    """Query-to-document InfoNCE with in-batch and per-query hard negatives."""
    B = batch.size
    allowed = np.ones((B, B), dtype=bool)
    if batch.negatives is not None and len(batch.negative_owner):
        cands = nx.concat([batch.positives, batch.negatives], axis=0)
        hard = np.zeros((B, len(batch.negative_owner)), dtype=bool)
        hard[batch.negative_owner, np.arange(len(batch.negative_owner))] = True
        allowed = np.concatenate([allowed, hard], axis=1)
    else:
        cands = batch.positives
    return contrastive(batch.queries, cands, np.arange(B), allowed, tau)


def gor_loss(queries, positives) -> Tensor:
    """Mean squared inner product over ordered pairs of distinct rows,
    for queries plus the same for positives."""
    total = None
    for z in (queries, positives):
        z = nx.as_tensor(z)
        B = z.shape[0]
        if B < 2:
            raise DomainError("GOR needs at least two rows")
        gram = nx.matmul(z, nx.swap_last(z))
        off = 1.0 - np.eye(B, dtype=z.dtype)
        term = nx.tsum(nx.square(gram) * off) * (1.0 / (B * (B - 1)))
        total = term if total is None else total + term
    return total


def retrieval_terms(triplets: TripletBatch, pairs: PairBatch, psi: Projection, tau,
                    distill_reduction: str = "sum") -> dict[str, Tensor]:
    return {
        "nce": info_nce(triplets, tau),
        "distill": distill_loss(pairs, psi, reduction=distill_reduction),
        "gor": gor_loss(triplets.queries, triplets.positives),
    }


def combine(terms: dict[str, Tensor], weights: dict[str, float]) -> Tensor:
    total = None
    for name, value in terms.items():
        w = weights.get(name, 0.0)
        if w == 0.0:
            continue
        term = value * w
        total = term if total is None else total + term
    if total is None:
        any_term = next(iter(terms.values()))
        return any_term * 0.0
    return total


def retrieval_loss(triplets: TripletBatch, pairs: PairBatch, w: LossWeights, psi: Projection,
                   tau=None, distill_reduction: str = "sum") -> Tensor:
    terms = retrieval_terms(triplets, pairs, psi, w.tau if tau is None else tau, distill_reduction)
    return combine(terms, {"nce": w.lambda_nce, "distill": w.lambda_d, "gor": w.lambda_s})


def cosent_loss(batch: ScoredPairBatch, tau_prime: float) -> Tensor:
    """``log(1 + sum_{s_i > s_j} exp((cos_j - cos_i) / tau'))``."""
    tau_prime = _tau(tau_prime)
    sim = nx.rowwise_cosine(batch.x, batch.y)
    s = batch.scores
    order = s[:, None] > s[None, :]
    B = len(s)
    diff = (sim.reshape(1, B) - sim.reshape(B, 1)) / tau_prime
    flat = nx.concat([diff.reshape(B * B), np.zeros(1, dtype=sim.dtype)], axis=0)
    mask = np.concatenate([order.reshape(-1), [True]])
    return nx.logsumexp(flat, axis=0, mask=mask)


@dataclass
class STSBatch:
    """A text-matching batch: scored pairs, or unscored pairs/triplets."""

    has_scores: bool
    scored: ScoredPairBatch | None = None
    triplets: TripletBatch | None = None
    pairs: PairBatch | None = None


def sts_loss(batch: STSBatch, w: LossWeights, psi: Projection, tau=None,
             distill_reduction: str = "sum") -> Tensor:
    if batch.has_scores:
        if batch.scored is None:
            raise ContractError("scored STS batch without scores")
        return cosent_loss(batch.scored, w.tau_prime)
    if batch.triplets is None or batch.pairs is None:
        raise ContractError("unscored STS batch needs triplet and pair views")
    nce = info_nce(batch.triplets, w.tau if tau is None else tau)
    dist = distill_loss(batch.pairs, psi, reduction=distill_reduction)
    return nce * w.lambda_nce + dist * w.lambda_d


def classification_terms(batch: ClassBatch, tau) -> dict[str, Tensor]:
    B = batch.size
    neg = nx.as_tensor(batch.negatives)
    flat_neg = neg.reshape(B * 7, neg.shape[2])
    cands = nx.concat([batch.positives, flat_neg], axis=0)
    q2d = contrastive(batch.anchors, cands, np.arange(B), np.ones((B, 8 * B), dtype=bool), tau)
    d2q = contrastive(batch.positives, batch.anchors, np.arange(B), np.ones((B, B), dtype=bool), tau)
    return {"q2d": q2d, "d2q": d2q}


def classification_loss(batch: ClassBatch, tau) -> Tensor:
    """Bidirectional InfoNCE: anchors against every positive and negative
    in the batch, positives against the other anchors only."""
    t = classification_terms(batch, tau)
    return t["q2d"] + t["d2q"]


def relational_kd(student, teacher) -> Tensor:
    """Mean squared difference of mean-normalised cosine-distance matrices."""
    s = nx.as_tensor(student)
    t = nx.as_tensor(teacher)
    M = s.shape[0]
    if M < 2 or t.shape[0] != M:
        raise ContractError("relational KD needs matching batches of at least 2 rows")
    ds = 1.0 - nx.cosine_matrix(s, s)
    dt = 1.0 - nx.cosine_matrix(t, t)
    mu_s = nx.tmean(ds)
    mu_t = nx.tmean(dt)
    if mu_s.item() <= 1e-12 or mu_t.item() <= 1e-12:
        raise DegenerateBatchError("all embeddings identical; distance mean is zero")
    diff = ds / mu_s - dt / mu_t
    return nx.tmean(nx.square(diff))


def score_distill_loss(batch: PairBatch, tau, include_diagonal: bool = True) -> Tensor:
    """Squared difference of row-softmaxed in-batch similarity matrices,
    averaged over rows, summed over the query and document sides."""
    tau = _tau(tau)
    B = batch.size
    if B < 2:
        raise DomainError("score distillation needs at least two rows")
    mask = None if include_diagonal else ~np.eye(B, dtype=bool)
    total = None
    for s, t in ((batch.student_x, batch.teacher_x), (batch.student_y, batch.teacher_y)):
        ps = nx.softmax(nx.cosine_matrix(s, s) / tau, axis=-1, mask=mask)
        pt = nx.softmax(nx.cosine_matrix(t, t) / tau, axis=-1, mask=mask)
        term = nx.tsum(nx.square(ps - pt)) * (1.0 / B)
        total = term if total is None else total + term
    return total
