"""Tiny student encoder, LoRA adapters, projection head and frozen teacher.

The student is a pre-norm transformer with rotary positions and
bidirectional attention.  Every input gets a role prefix token and an
end-of-sequence token; the embedding is the L2-normalised final hidden
state at the end-of-sequence position.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DomainError
from .numerics import Tensor
from .tokenizer import DOCUMENT_ID, EOS_ID, PAD_ID, QUERY_ID


class TaskKind(str, enum.Enum):
    RETRIEVAL = "retrieval"
    TEXT_MATCHING = "text-matching"
    CLUSTERING = "clustering"
    CLASSIFICATION = "classification"


class Role(str, enum.Enum):
    QUERY = "query"
    DOCUMENT = "document"

    @property
    def prefix(self) -> str:
        return "Query:" if self is Role.QUERY else "Document:"

    @property
    def prefix_id(self) -> int:
        return QUERY_ID if self is Role.QUERY else DOCUMENT_ID


class Instruction(str, enum.Enum):
    GENERIC_RETRIEVAL = "generic-retrieval"
    CLUSTERING_TOPIC = "clustering-topic"


class ProjectionSide(str, enum.Enum):
    STUDENT = "student"
    TEACHER = "teacher"


LORA_TARGETS = ("wq", "wk", "wv", "wo")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 512
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    ffn_dim: int = 64
    max_tokens: int = 64
    rope_theta: float = 10_000.0
    teacher_dim: int = 64
    inference_rope_theta: float | None = None

    def __post_init__(self):
        if self.embed_dim % (2 * self.heads):
            raise ConfigError("embed_dim must be divisible by 2*heads")
        if self.rope_theta <= 0 or (self.inference_rope_theta is not None and self.inference_rope_theta <= 0):
            raise ConfigError("rope_theta must be positive")
        if self.teacher_dim <= self.embed_dim:
            raise ConfigError("teacher_dim must exceed embed_dim")
        if self.max_tokens < 3:
            raise ConfigError("max_tokens must leave room for prefix, body and EOS")
        if min(self.layers, self.heads, self.ffn_dim, self.vocab_size) < 1:
            raise ConfigError("layer/head/ffn/vocab counts must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def eval_theta(self) -> float:
        return self.inference_rope_theta or self.rope_theta

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown encoder fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- parameters


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    n, f = cfg.embed_dim, cfg.ffn_dim

    def dense(out_dim, in_dim):
        return (rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)).astype(dtype)

    p = {"tok_emb": rng.standard_normal((cfg.vocab_size, n)).astype(dtype)}
    for i in range(cfg.layers):
        pre = f"layers.{i}."
        p[pre + "attn_norm"] = np.ones(n, dtype)
        for name in LORA_TARGETS:
            p[pre + name] = dense(n, n)
        p[pre + "ffn_norm"] = np.ones(n, dtype)
        p[pre + "w1"] = dense(f, n)
        p[pre + "w2"] = dense(n, f)
    p["final_norm"] = np.ones(n, dtype)
    return p


@dataclass
class LoraAdapter:
    """Low-rank update ``(alpha/rank) * B @ A`` for each target matrix."""

    task: TaskKind
    rank: int = 32
    alpha: float = 32.0
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("LoRA rank must be >= 1")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def targets(self) -> list[str]:
        return sorted({k[: -len(".A")] for k in self.weights if k.endswith(".A")})


def init_adapter(
    cfg: EncoderConfig,
    task: TaskKind,
    rng: np.random.Generator,
    rank: int = 32,
    alpha: float = 32.0,
    targets: Sequence[str] = LORA_TARGETS,
    dtype=np.float32,
) -> LoraAdapter:
    """A random-A, zero-B adapter: the initial update is exactly zero."""
    n = cfg.embed_dim
    w = {}
    for i in range(cfg.layers):
        for name in targets:
            key = f"layers.{i}.{name}"
            w[key + ".A"] = (rng.standard_normal((rank, n)) / np.sqrt(n)).astype(dtype)
            w[key + ".B"] = np.zeros((n, rank), dtype)
    return LoraAdapter(task=TaskKind(task), rank=rank, alpha=alpha, weights=w)


def apply_adapter(params: Mapping[str, np.ndarray], adapter: LoraAdapter) -> dict[str, np.ndarray]:
    """Effective weights ``W + (alpha/r) B A``; ``params`` is left untouched."""
    out = dict(params)
    for key in adapter.targets():
        if key not in params:
            raise ConfigError(f"adapter targets unknown matrix {key}")
        A = adapter.weights[key + ".A"]
        B = adapter.weights[key + ".B"]
        W = params[key]
        if A.shape != (adapter.rank, W.shape[1]) or B.shape != (W.shape[0], adapter.rank):
            raise ConfigError(f"adapter shapes {A.shape}/{B.shape} incompatible with {key} {W.shape}")
        out[key] = W + adapter.scaling * (B @ A)
    return out


@dataclass
class Projection:
    """Affine map ``W z + b`` between student (n) and teacher (m) spaces.

    StudentSide maps n -> m (W is m x n); TeacherSide maps m -> n.
    """

    W: np.ndarray
    b: np.ndarray
    side: ProjectionSide = ProjectionSide.STUDENT
    trainable: bool = True


def init_projection(cfg: EncoderConfig, rng: np.random.Generator, side=ProjectionSide.STUDENT,
                    trainable=True, dtype=np.float32) -> Projection:
    side = ProjectionSide(side)
    n, m = cfg.embed_dim, cfg.teacher_dim
    out_dim, in_dim = (m, n) if side is ProjectionSide.STUDENT else (n, m)
    W = (rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)).astype(dtype)
    return Projection(W=W, b=np.zeros(out_dim, dtype), side=side, trainable=trainable)


def project(psi: Projection, z):
    """Apply ``psi`` to a vector or to the rows of a matrix.

    Works on numpy arrays and, when ``psi`` holds Tensors, on Tensors.
    """
    W, b = psi.W, psi.b
    in_dim = W.shape[1]
    if z.shape[-1] != in_dim:
        raise ContractError(f"projection expects dim {in_dim}, got {z.shape[-1]}")
    if isinstance(z, Tensor) or isinstance(W, Tensor):
        return nx.matmul(nx.as_tensor(z), nx.swap_last(nx.as_tensor(W))) + b
    z = np.asarray(z)
    return z @ np.asarray(W).T + np.asarray(b)


# ---------------------------------------------------------------- rotary positions


def _rope_tables(length: int, dim: int, theta: float, dtype=np.float64):
    if dim % 2:
        raise ConfigError("rotary dimension must be even")
    if theta <= 0:
        raise ConfigError("rope theta must be positive")
    k = np.arange(dim // 2)
    freq = theta ** (-2.0 * k / dim)
    ang = np.arange(length)[:, None] * freq[None, :]
    cos = np.repeat(np.cos(ang), 2, axis=1).astype(dtype)
    sin = np.repeat(np.sin(ang), 2, axis=1).astype(dtype)
    return cos, sin


def _rotate_half_matrix(dim: int, dtype=np.float64) -> np.ndarray:
    # x @ R maps each pair (a, b) to (-b, a)
    R = np.zeros((dim, dim), dtype)
    for k in range(dim // 2):
        R[2 * k + 1, 2 * k] = -1.0
        R[2 * k, 2 * k + 1] = 1.0
    return R


def rope_rotate(x, theta: float, positions=None) -> np.ndarray:
    """Rotate consecutive coordinate pairs of each position's vector.

    ``x`` has shape (positions, d) (leading batch axes allowed).  Pair k at
    position p turns by ``p * theta ** (-2k/d)`` radians.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    L = x.shape[-2] if x.ndim >= 2 else 1
    x2 = x.reshape(x.shape if x.ndim >= 2 else (1, d))
    if positions is None:
        positions = np.arange(L)
    positions = np.asarray(positions)
    cos, sin = _rope_tables(int(positions.max()) + 1 if positions.size else 1, d, theta)
    cos, sin = cos[positions], sin[positions]
    out = x2 * cos + (x2 @ _rotate_half_matrix(d)) * sin
    return out.reshape(x.shape)


# ---------------------------------------------------------------- encoder


def build_sequences(token_lists: Sequence[Sequence[int]], roles, max_tokens: int):
    """Prefix + body + EOS, right-padded.  Overlong bodies lose their tail.

    ``roles`` is one Role for all rows or one per row.  Returns
    ``(ids, lengths)``.
    """
    if isinstance(roles, (Role, str)):
        roles = [Role(roles)] * len(token_lists)
    rows = []
    for toks, role in zip(token_lists, roles):
        if len(toks) == 0:
            raise DomainError("cannot encode an empty token sequence")
        body = list(toks)[: max_tokens - 2]
        rows.append([Role(role).prefix_id] + body + [EOS_ID])
    L = max(len(r) for r in rows)
    ids = np.full((len(rows), L), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    return ids, lengths


_ROPE_CACHE: dict = {}


def _rope_consts(L, dh, theta, dtype):
    key = (L, dh, float(theta), np.dtype(dtype).str)
    hit = _ROPE_CACHE.get(key)
    if hit is None:
        cos, sin = _rope_tables(L, dh, theta, dtype)
        hit = (nx.Tensor(cos), nx.Tensor(sin), nx.Tensor(_rotate_half_matrix(dh, dtype)))
        if len(_ROPE_CACHE) > 256:
            _ROPE_CACHE.clear()
        _ROPE_CACHE[key] = hit
    return hit


def _linear(x: Tensor, W, lora: Mapping | None, key: str, scaling: float) -> Tensor:
    if lora is not None and key + ".A" in lora:
        W = W + scaling * nx.matmul(lora[key + ".B"], lora[key + ".A"])
    return nx.matmul(x, nx.swap_last(nx.as_tensor(W)))


def forward(
    params: Mapping,
    cfg: EncoderConfig,
    ids: np.ndarray,
    lengths: np.ndarray,
    lora: Mapping | None = None,
    lora_scaling: float = 1.0,
    theta: float | None = None,
    normalize: bool = True,
) -> Tensor:
    """Embeddings for a padded id batch.  ``params``/``lora`` values may be
    numpy arrays (constants) or Tensors (differentiable leaves)."""
    P = {k: nx.as_tensor(v) for k, v in params.items()}
    Bn, L = ids.shape
    H, dh, n = cfg.heads, cfg.head_dim, cfg.embed_dim
    dtype = P["tok_emb"].dtype
    cos, sin, R = _rope_consts(L, dh, theta or cfg.rope_theta, dtype)
    key_mask = (np.arange(L)[None, :] < lengths[:, None])[:, None, None, :]
    inv_sqrt = 1.0 / np.sqrt(dh)

    x = P["tok_emb"][ids]
    for i in range(cfg.layers):
        pre = f"layers.{i}."
        h = nx.rms_norm(x, P[pre + "attn_norm"])

        def heads(name):
            t = _linear(h, P[pre + name], lora, pre + name, lora_scaling)
            return t.reshape(Bn, L, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        q = q * cos + nx.matmul(q, R) * sin
        k = k * cos + nx.matmul(k, R) * sin
        scores = nx.matmul(q, nx.swap_last(k)) * inv_sqrt
        att = nx.softmax(scores, axis=-1, mask=key_mask)
        o = nx.matmul(att, v).transpose(0, 2, 1, 3).reshape(Bn, L, n)
        x = x + _linear(o, P[pre + "wo"], lora, pre + "wo", lora_scaling)
        h = nx.rms_norm(x, P[pre + "ffn_norm"])
        x = x + _linear(nx.gelu(_linear(h, P[pre + "w1"], lora, pre + "w1", lora_scaling)),
                        P[pre + "w2"], lora, pre + "w2", lora_scaling)
    x = nx.rms_norm(x, P["final_norm"])
    pooled = x[np.arange(Bn), lengths - 1]
    return nx.l2_normalize(pooled) if normalize else pooled


@dataclass
class StudentModel:
    """Encoder weights plus per-task adapters and the projection head."""

    config: EncoderConfig
    params: dict[str, np.ndarray]
    adapters: dict[TaskKind, LoraAdapter] = field(default_factory=dict)
    projection: Projection | None = None

    def copy(self) -> "StudentModel":
        return StudentModel(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            adapters={t: replace(a, weights={k: v.copy() for k, v in a.weights.items()})
                      for t, a in self.adapters.items()},
            projection=None if self.projection is None else replace(
                self.projection, W=self.projection.W.copy(), b=self.projection.b.copy()),
        )


def embed_tokens(model: StudentModel, token_lists, role, task: TaskKind | None = None,
                 theta: float | None = None, batch_size: int = 256) -> np.ndarray:
    """Batched, gradient-free encoding; returns an (N, n) float64 array."""
    cfg = model.config
    lora, scaling = None, 1.0
    if task is not None:
        adapter = model.adapters.get(TaskKind(task))
        if adapter is None:
            raise ConfigError(f"model has no adapter for task {task}")
        lora, scaling = adapter.weights, adapter.scaling
    roles = [Role(role)] * len(token_lists) if isinstance(role, (Role, str)) else list(role)
    # Sort by length so padding stays small; restore order afterwards.
    order = np.argsort([len(t) for t in token_lists], kind="stable")
    out = np.zeros((len(token_lists), cfg.embed_dim))
    for s in range(0, len(order), batch_size):
        idx = order[s: s + batch_size]
        ids, lengths = build_sequences([token_lists[i] for i in idx], [roles[i] for i in idx], cfg.max_tokens)
        out[idx] = forward(model.params, cfg, ids, lengths, lora, scaling, theta).data
    return out


def encode(model: StudentModel, tokens: Sequence[int], role: Role, task: TaskKind | None = None,
           theta: float | None = None) -> np.ndarray:
    """Unit-norm embedding of one token sequence."""
    return embed_tokens(model, [list(tokens)], role, task, theta)[0]


# ---------------------------------------------------------------- teacher


class TeacherOracle:
    """Frozen, seeded wide encoder standing in for a large trained model.

    Each token is lifted to ``dim`` random features, passed through a
    fixed ``tanh`` mixing layer and mean-pooled; an instruction selects
    one of two fixed output heads.

    ``groups`` and ``damped`` give the random lift some prior knowledge:
    tokens of one group share a common random direction (weight
    ``group_weight``) and ``damped`` tokens are scaled by ``damp``.  With
    neither the teacher is a plain random encoder.
    """

    def __init__(self, vocab_size: int = 512, dim: int = 64, seed: int = 0,
                 groups: Sequence[Sequence[int]] | None = None, damped: Sequence[int] | None = None,
                 group_weight: float = 0.6, damp: float = 0.1):
        if not 0 <= group_weight < 1:
            raise DomainError("group_weight must lie in [0, 1)")
        self.vocab_size = vocab_size
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng([seed, 0x7EAC])
        table = rng.standard_normal((vocab_size, dim))
        self.mixer = rng.standard_normal((dim, dim)) / np.sqrt(dim)
        self.heads = {
            Instruction.GENERIC_RETRIEVAL: np.linalg.qr(rng.standard_normal((dim, dim)))[0],
            Instruction.CLUSTERING_TOPIC: rng.standard_normal((dim, dim)) / np.sqrt(dim),
        }
        if groups is not None:
            grng = np.random.default_rng([seed, 0x6A0])
            for g in groups:
                g = np.asarray(g, dtype=np.int64)
                table[g] = group_weight * grng.standard_normal(dim) + np.sqrt(1 - group_weight ** 2) * table[g]
        if damped is not None:
            table[np.asarray(damped, dtype=np.int64)] *= damp
        self.token_table = table
        self.features = np.tanh(table @ self.mixer)
        for arr in [self.token_table, self.mixer, self.features, *self.heads.values()]:
            arr.setflags(write=False)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"token_table": self.token_table, "mixer": self.mixer}
        out.update({f"head.{k.value}": v for k, v in self.heads.items()})
        return out

    def embed_batch(self, token_lists, role, instruction=Instruction.GENERIC_RETRIEVAL) -> np.ndarray:
        instruction = Instruction(instruction)
        roles = [Role(role)] * len(token_lists) if isinstance(role, (Role, str)) else list(role)
        feats = self.features
        out = np.empty((len(token_lists), self.dim))
        for i, (toks, r) in enumerate(zip(token_lists, roles)):
            if len(toks) == 0:
                raise DomainError("cannot encode an empty token sequence")
            seq = np.concatenate([[r.prefix_id], np.asarray(toks, dtype=np.int64)])
            out[i] = feats[seq].mean(axis=0)
        out = out @ self.heads[instruction].T
        return out / np.linalg.norm(out, axis=1, keepdims=True)


def teacher_embed(oracle: TeacherOracle, tokens, role: Role,
                  instruction: Instruction = Instruction.GENERIC_RETRIEVAL) -> np.ndarray:
    return oracle.embed_batch([list(tokens)], role, instruction)[0]


# ---------------------------------------------------------------- averaging


def _average(a, b):
    if isinstance(a, np.ndarray):
        if a.shape != b.shape:
            raise ContractError(f"cannot average shapes {a.shape} and {b.shape}")
        return ((a.astype(np.float64) + b.astype(np.float64)) / 2).astype(a.dtype)
    if isinstance(a, dict):
        if set(a) != set(b):
            raise ContractError("cannot average parameter sets with different keys")
        return {k: _average(a[k], b[k]) for k in a}
    if isinstance(a, LoraAdapter):
        if (a.task, a.rank, a.alpha) != (b.task, b.rank, b.alpha):
            raise ContractError("cannot average adapters of different task/rank/alpha")
        return replace(a, weights=_average(a.weights, b.weights))
    if isinstance(a, Projection):
        return replace(a, W=_average(a.W, b.W), b=_average(a.b, b.b))
    if isinstance(a, StudentModel):
        return StudentModel(
            config=a.config,
            params=_average(a.params, b.params),
            adapters=_average(a.adapters, b.adapters),
            projection=None if a.projection is None else _average(a.projection, b.projection),
        )
    if isinstance(a, (list, tuple)):
        return type(a)(_average(x, y) for x, y in zip(a, b))
    return (np.asarray(a, dtype=np.float64) + np.asarray(b, dtype=np.float64)) / 2


def checkpoint_average(a, b):
    """Elementwise mean of two parameter structures of identical shape."""
    return _average(a, b)
