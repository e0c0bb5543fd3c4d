"""Two-stage training: embedding distillation, then per-task LoRA adapters.

Every run is a pure function of its :class:`TrainConfig` (and, for stage
two, the base checkpoint): sampling, initialisation and optimisation all
draw from generators seeded by ``config.seed``.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import math
import time
from importlib import resources
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import data as D
from . import losses as L
from . import numerics as nx
from .checkpoint import arrays_sha256, read_emlb, write_emlb
from .errors import ConfigError, ContractError, NonFiniteError
from .model import (
    EncoderConfig,
    Instruction,
    LoraAdapter,
    Projection,
    ProjectionSide,
    Role,
    StudentModel,
    TaskKind,
    TeacherOracle,
    build_sequences,
    checkpoint_average,
    embed_tokens,
    forward,
    init_adapter,
    init_encoder,
    init_projection,
)
from .numerics import Tensor
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class Stage(str, enum.Enum):
    DISTILL = "distill"
    LONG_CONTEXT = "long-context"
    ADAPTER_RETRIEVAL = "adapter-retrieval"
    ADAPTER_STS = "adapter-sts"
    ADAPTER_CLUSTERING = "adapter-clustering"
    ADAPTER_CLASSIFICATION = "adapter-classification"

    @property
    def task(self) -> TaskKind | None:
        return _STAGE_TASK.get(self)

    @property
    def is_adapter(self) -> bool:
        return self.task is not None


_STAGE_TASK = {
    Stage.ADAPTER_RETRIEVAL: TaskKind.RETRIEVAL,
    Stage.ADAPTER_STS: TaskKind.TEXT_MATCHING,
    Stage.ADAPTER_CLUSTERING: TaskKind.CLUSTERING,
    Stage.ADAPTER_CLASSIFICATION: TaskKind.CLASSIFICATION,
}
TASK_STAGE = {t: s for s, t in _STAGE_TASK.items()}

STAGE_KINDS = {
    Stage.DISTILL: {"pairs"},
    Stage.LONG_CONTEXT: {"pairs"},
    Stage.ADAPTER_RETRIEVAL: {"triplets"},
    Stage.ADAPTER_STS: {"scored", "pairs", "triplets"},
    Stage.ADAPTER_CLUSTERING: {"pairs"},
    Stage.ADAPTER_CLASSIFICATION: {"class"},
}

OBJECTIVES = ("distill", "nce", "score")
RETRIEVAL_COMPONENTS = ("nce", "distill", "gor")


# ---------------------------------------------------------------- configuration


@dataclass
class DatasetBinding:
    name: str
    kind: str
    weight: float = 1.0
    batch_size: int | None = None
    max_tokens: int | None = None
    path: str | None = None
    generate: dict | None = None
    records: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in D.SCHEMAS:
            raise ConfigError(f"dataset {self.name}: unknown kind {self.kind!r}")
        if self.weight < 0:
            raise ConfigError(f"dataset {self.name}: negative sampling weight")
        if self.path is None and self.generate is None and self.records is None:
            raise ConfigError(f"dataset {self.name}: needs a path, a generate block or records")

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "weight": self.weight}
        for k in ("batch_size", "max_tokens", "path", "generate"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        return d

    def load(self, world: D.SyntheticWorld) -> list[dict]:
        if self.records is None:
            if self.path is not None:
                self.records = D.read_jsonl(self.path, self.kind)
            else:
                self.records = generate_records(world, self.kind, self.generate)
        if not self.records:
            raise ConfigError(f"dataset {self.name} is empty")
        return self.records


def generate_records(world: D.SyntheticWorld, kind: str, spec: Mapping) -> list[dict]:
    spec = dict(spec)
    size = int(spec.pop("size"))
    if kind == "pairs":
        return D.gen_pairs(world, size, **spec)
    if kind == "triplets":
        return D.gen_retrieval(world, size, **spec)
    if kind == "scored":
        return D.gen_scored_pairs(world, size, **spec)
    if kind == "class":
        return D.gen_class_tuples(world, size, **spec)
    raise ConfigError(f"cannot generate datasets of kind {kind!r}")


@dataclass
class TrainConfig:
    stage: Stage = Stage.DISTILL
    steps: int = 1000
    learning_rate: float = 2e-3
    batch_size: int = 32
    max_tokens: int = 64
    rope_theta: float = 10_000.0
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    datasets: list[DatasetBinding] = field(default_factory=list)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    world: D.WorldConfig = field(default_factory=D.WorldConfig)
    teacher_seed: int = 0
    teacher_prior: bool = True
    teacher_group_weight: float = 0.6
    teacher_damp: float = 0.1
    objective: str = "distill"
    projection_side: ProjectionSide = ProjectionSide.STUDENT
    projection_trainable: bool = True
    stage2_projection_trainable: bool = False
    components: tuple[str, ...] = RETRIEVAL_COMPONENTS
    mrl: bool = False
    mrl_ladder: tuple[int, ...] | None = None
    lora_rank: int = 32
    lora_alpha: float = 32.0
    average_checkpoints: bool = True
    average_at: float = 0.5
    warmup_frac: float = 0.01
    eval_every: int = 0

    def __post_init__(self):
        self.stage = Stage(self.stage)
        self.projection_side = ProjectionSide(self.projection_side)
        self.components = tuple(self.components)
        if self.mrl_ladder is not None:
            self.mrl_ladder = tuple(int(k) for k in self.mrl_ladder)
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        bad = set(self.components) - set(RETRIEVAL_COMPONENTS)
        if bad or not self.components:
            raise ConfigError(f"components must be a non-empty subset of {RETRIEVAL_COMPONENTS}")
        if not 0 < self.average_at < 1:
            raise ConfigError("average_at must lie strictly between 0 and 1")
        for b in self.datasets:
            if b.kind not in STAGE_KINDS[self.stage]:
                raise ConfigError(f"dataset {b.name} of kind {b.kind} cannot feed stage {self.stage.value}")
        if self.datasets and not any(b.weight > 0 for b in self.datasets):
            raise ConfigError("at least one dataset needs a positive sampling weight")

    # -- serialisation

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "stage": self.stage.value,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_tokens": self.max_tokens,
            "rope_theta": self.rope_theta,
            "loss_weights": self.loss_weights.to_dict(),
            "seed": self.seed,
            "datasets": [b.to_dict() for b in self.datasets],
            "encoder": self.encoder.to_dict(),
            "world": self.world.to_dict(),
            "teacher_seed": self.teacher_seed,
            "teacher_prior": self.teacher_prior,
            "teacher_group_weight": self.teacher_group_weight,
            "teacher_damp": self.teacher_damp,
            "objective": self.objective,
            "projection_side": self.projection_side.value,
            "projection_trainable": self.projection_trainable,
            "stage2_projection_trainable": self.stage2_projection_trainable,
            "components": list(self.components),
            "mrl": self.mrl,
            "mrl_ladder": None if self.mrl_ladder is None else list(self.mrl_ladder),
            "lora_rank": self.lora_rank,
            "lora_alpha": self.lora_alpha,
            "average_checkpoints": self.average_checkpoints,
            "average_at": self.average_at,
            "warmup_frac": self.warmup_frac,
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            if "loss_weights" in d:
                d["loss_weights"] = L.LossWeights(**d["loss_weights"])
            if "encoder" in d:
                d["encoder"] = EncoderConfig.from_dict(d["encoder"])
            if "world" in d:
                d["world"] = D.WorldConfig.from_dict(d["world"])
            if "datasets" in d:
                d["datasets"] = [DatasetBinding(**b) for b in d["datasets"]]
            if d.get("components") is not None:
                d["components"] = tuple(d["components"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def hash(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(raw.encode()).hexdigest()[:16]

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


PRESETS = ("distill", "long-context", "adapter-retrieval", "adapter-sts", "adapter-clustering",
           "adapter-classification")


def load_preset(name: str) -> TrainConfig:
    """One of the shipped stage configurations (see ``embedlab/presets``)."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid: {', '.join(PRESETS)}")
    raw = resources.files("embedlab.presets").joinpath(f"{name}.json").read_text()
    return TrainConfig.from_dict(json.loads(raw))


def load_config(path) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return TrainConfig.from_dict(raw)


# ---------------------------------------------------------------- sampling


class BatchSampler:
    """Weighted choice of dataset per step; each dataset is walked through a
    seeded permutation and reshuffled when exhausted."""

    def __init__(self, bindings: Sequence[DatasetBinding], seed: int):
        if not bindings:
            raise ConfigError("no datasets bound")
        w = np.array([b.weight for b in bindings], dtype=np.float64)
        if (w < 0).any() or w.sum() <= 0:
            raise ConfigError("dataset weights must be >= 0 with at least one positive")
        self.bindings = list(bindings)
        self.p = w / w.sum()
        self.seed = seed
        self.cursor = [0] * len(bindings)
        self.epoch = [0] * len(bindings)
        self._perm: dict[int, np.ndarray] = {}

    def _order(self, i: int) -> np.ndarray:
        key = (i, self.epoch[i])
        if self._perm.get(i) is None or self._perm[i][0] != key:
            n = len(self.bindings[i].records)
            perm = np.random.default_rng([self.seed, 7919, i, self.epoch[i]]).permutation(n)
            self._perm[i] = (key, perm)
        return self._perm[i][1]

    def take(self, i: int, size: int) -> list:
        recs = self.bindings[i].records
        out = []
        while len(out) < size:
            order = self._order(i)
            if self.cursor[i] >= len(order):
                self.epoch[i] += 1
                self.cursor[i] = 0
                continue
            out.append(recs[order[self.cursor[i]]])
            self.cursor[i] += 1
        return out

    def pick(self, rng: np.random.Generator) -> int:
        if len(self.bindings) == 1:
            return 0
        return int(rng.choice(len(self.bindings), p=self.p))

    def state(self) -> dict:
        return {"cursor": list(self.cursor), "epoch": list(self.epoch)}

    def load_state(self, state: Mapping) -> None:
        self.cursor = list(state["cursor"])
        self.epoch = list(state["epoch"])


def sample_batch(bindings: Sequence[DatasetBinding], step: int, rng: np.random.Generator,
                 sampler: BatchSampler | None = None, default_batch: int = 32, default_max_tokens: int = 64):
    """Pick a dataset by weight and return ``(binding, records, batch_size, max_tokens)``."""
    sampler = sampler or BatchSampler(bindings, seed=step)
    i = sampler.pick(rng)
    b = sampler.bindings[i]
    bs = b.batch_size or default_batch
    mt = b.max_tokens or default_max_tokens
    return b, sampler.take(i, bs), bs, mt


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_init(params: Mapping[str, np.ndarray]) -> AdamState:
    return AdamState({k: np.zeros_like(v) for k, v in params.items()},
                     {k: np.zeros_like(v) for k, v in params.items()}, 0)


def optimize_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float,
                  state: AdamState) -> tuple[dict[str, np.ndarray], AdamState, bool]:
    """One Adam update.  Non-finite gradients reject the step: parameters
    and moments come back unchanged and the flag is False."""
    if set(params) != set(grads):
        raise ContractError("gradient keys differ from parameter keys")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ContractError(f"gradient for {k} has shape {g.shape}, expected {params[k].shape}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient for %s; step rejected", k)
            return dict(params), state, False
    t = state.t + 1
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k].astype(p.dtype, copy=False)
        m = (BETA1 * state.m[k] + (1.0 - BETA1) * g).astype(p.dtype)
        v = (BETA2 * state.v[k] + (1.0 - BETA2) * (g * g)).astype(p.dtype)
        step = (lr / c1) * m / (np.sqrt(v / c2) + ADAM_EPS)
        new_p[k] = (p - step).astype(p.dtype)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t), True


def learning_rate_at(step: int, config: TrainConfig) -> float:
    """Linear warm-up over ``warmup_frac`` of the steps, then constant."""
    warm = max(1, int(round(config.warmup_frac * config.steps)))
    return config.learning_rate * min(1.0, (step + 1) / warm)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    step: int
    model: StudentModel
    stage: Stage = Stage.DISTILL
    log_tau: float | None = None
    optimizer: AdamState | None = None
    rng_state: dict | None = None
    sampler_state: dict | None = None
    config: dict | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list, compare=False)

    def tensors(self) -> dict[str, np.ndarray]:
        m = self.model
        out = {f"enc.{k}": v for k, v in m.params.items()}
        for task, ad in m.adapters.items():
            out.update({f"lora.{task.value}.{k}": v for k, v in ad.weights.items()})
        if m.projection is not None:
            out["proj.W"], out["proj.b"] = m.projection.W, m.projection.b
        if self.log_tau is not None:
            out["state.log_tau"] = np.asarray([self.log_tau], np.float32)
        if self.optimizer is not None:
            out.update({f"opt.m.{k}": v for k, v in self.optimizer.m.items()})
            out.update({f"opt.v.{k}": v for k, v in self.optimizer.v.items()})
        out.update({f"extra.{k}": v for k, v in self.extra.items()})
        return out

    def meta(self) -> dict:
        m = self.model
        return {
            "format": "embedlab-checkpoint",
            "step": self.step,
            "stage": self.stage.value,
            "encoder": m.config.to_dict(),
            "adapters": {t.value: {"rank": a.rank, "alpha": a.alpha} for t, a in m.adapters.items()},
            "projection": None if m.projection is None else {
                "side": m.projection.side.value, "trainable": m.projection.trainable},
            "optimizer_t": None if self.optimizer is None else self.optimizer.t,
            "rng_state": self.rng_state,
            "sampler_state": self.sampler_state,
            "train_config": self.config,
        }

    def save(self, path) -> None:
        write_emlb(path, self.meta(), self.tensors())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        meta, t = read_emlb(path)
        if meta.get("format") != "embedlab-checkpoint":
            raise ConfigError(f"{path}: not an embedlab checkpoint")
        cfg = EncoderConfig.from_dict(meta["encoder"])
        params = {k[4:]: v for k, v in t.items() if k.startswith("enc.")}
        adapters = {}
        for task, info in meta["adapters"].items():
            pre = f"lora.{task}."
            adapters[TaskKind(task)] = LoraAdapter(
                TaskKind(task), info["rank"], info["alpha"],
                {k[len(pre):]: v for k, v in t.items() if k.startswith(pre)})
        proj = None
        if meta["projection"] is not None:
            proj = Projection(t["proj.W"], t["proj.b"], ProjectionSide(meta["projection"]["side"]),
                              meta["projection"]["trainable"])
        opt = None
        if meta["optimizer_t"] is not None:
            opt = AdamState({k[6:]: v for k, v in t.items() if k.startswith("opt.m.")},
                            {k[6:]: v for k, v in t.items() if k.startswith("opt.v.")}, meta["optimizer_t"])
        log_tau = float(t["state.log_tau"][0]) if "state.log_tau" in t else None
        extra = {k[6:]: v for k, v in t.items() if k.startswith("extra.")}
        return cls(meta["step"], StudentModel(cfg, params, adapters, proj), Stage(meta["stage"]), log_tau, opt,
                   meta["rng_state"], meta["sampler_state"], meta["train_config"], extra)

    def backbone_hash(self) -> str:
        return arrays_sha256(self.model.params)


def teacher_for(config: TrainConfig) -> TeacherOracle:
    """The frozen teacher of a run.  With ``teacher_prior`` its token lift
    knows the world's topic blocks and discounts stopwords and query
    filler, the way a pretrained model would."""
    cfg = config.encoder
    if not config.teacher_prior:
        return TeacherOracle(cfg.vocab_size, cfg.teacher_dim, config.teacher_seed)
    world = D.SyntheticWorld(config.world)
    damped = np.concatenate([world.stop_ids, world.query_ids])
    return TeacherOracle(cfg.vocab_size, cfg.teacher_dim, config.teacher_seed, groups=world.blocks,
                         damped=damped, group_weight=config.teacher_group_weight, damp=config.teacher_damp)


# ---------------------------------------------------------------- batch assembly


class _TokenCache:
    """Tokenised fields and teacher embeddings, memoised per text."""

    def __init__(self, tokenizer: Tokenizer, teacher: TeacherOracle | None):
        self.tok = tokenizer
        self.teacher = teacher
        self._ids: dict[str, list[int]] = {}
        self._t: dict[tuple, np.ndarray] = {}

    def ids(self, texts: Sequence[str]) -> list[list[int]]:
        out = []
        for s in texts:
            v = self._ids.get(s)
            if v is None:
                v = self._ids[s] = self.tok.encode(s)
            out.append(v)
        return out

    def teach(self, texts: Sequence[str], role: Role, instruction: Instruction, max_tokens: int) -> np.ndarray:
        missing = [s for s in dict.fromkeys(texts) if (s, role, instruction, max_tokens) not in self._t]
        if missing:
            toks = [t[: max_tokens - 2] for t in self.ids(missing)]
            emb = self.teacher.embed_batch(toks, role, instruction).astype(np.float32)
            for s, e in zip(missing, emb):
                self._t[(s, role, instruction, max_tokens)] = e
        return np.stack([self._t[(s, role, instruction, max_tokens)] for s in texts])


class _Run:
    """Mutable state of one training run."""

    def __init__(self, config: TrainConfig, model: StudentModel, teacher: TeacherOracle | None):
        self.config = config
        self.model = model
        self.teacher = teacher
        self.cache = _TokenCache(Tokenizer(config.encoder.vocab_size), teacher)
        self.task = config.stage.task
        self.theta = config.rope_theta
        self.ladder = self._ladder()

    def _ladder(self) -> tuple[int, ...]:
        n = self.config.encoder.embed_dim
        if not self.config.mrl:
            return (n,)
        ladder = self.config.mrl_ladder or (n, n // 2, n // 4)
        if ladder[0] != n or any(k < 1 or k > n for k in ladder):
            raise ConfigError(f"MRL ladder must start at {n} and stay within [1, {n}]")
        return ladder

    # -- parameter views

    def enc_view(self, P):
        return {k: P.get("enc." + k, v) for k, v in self.model.params.items()}

    def lora_view(self, P, task):
        ad = self.model.adapters[task]
        return {k: P.get(f"lora.{task.value}.{k}", v) for k, v in ad.weights.items()}, ad.scaling

    def proj_view(self, P) -> Projection:
        psi = self.model.projection
        return replace(psi, W=P.get("proj.W", psi.W), b=P.get("proj.b", psi.b))

    def tau(self, P):
        if "log_tau" in P:
            return L.tau_from_log(P["log_tau"])
        return self.config.loss_weights.tau

    # -- student forward

    def pooled(self, P, texts, role, max_tokens, use_adapter=True) -> Tensor:
        ids, lengths = build_sequences(self.cache.ids(texts), role, max_tokens)
        lora, scale = (None, 1.0)
        if use_adapter and self.task is not None:
            lora, scale = self.lora_view(P, self.task)
        return forward(self.enc_view(P), self.config.encoder, ids, lengths, lora, scale, self.theta, normalize=False)

    def views(self, pooled: Tensor) -> list[tuple[int, Tensor]]:
        n = pooled.shape[1]
        return [(k, nx.l2_normalize(pooled if k == n else pooled[:, :k])) for k in self.ladder]

    def proj_at(self, psi: Projection, k: int) -> Projection:
        n = self.config.encoder.embed_dim
        if k == n:
            return psi
        if psi.side is ProjectionSide.STUDENT:
            return replace(psi, W=nx.as_tensor(psi.W)[:, :k])
        return replace(psi, W=nx.as_tensor(psi.W)[:k, :], b=nx.as_tensor(psi.b)[:k])


def _sum_terms(acc: dict, new: dict):
    for k, v in new.items():
        acc[k] = v if k not in acc else acc[k] + v


# -- objectives per stage.  Each returns (total, {name: Tensor}).


def _pair_objective(run: _Run, P, recs, max_tokens, instruction, q_role, objective):
    w = run.config.loss_weights
    qs, ds = [r["q"] for r in recs], [r["d"] for r in recs]
    sx = run.views(run.pooled(P, qs, q_role, max_tokens))
    sy = run.views(run.pooled(P, ds, Role.DOCUMENT, max_tokens))
    tx = run.cache.teach(qs, q_role, instruction, max_tokens) if objective != "nce" else None
    ty = run.cache.teach(ds, Role.DOCUMENT, instruction, max_tokens) if objective != "nce" else None
    psi = run.proj_view(P)
    terms: dict = {}
    for (k, x), (_, y) in zip(sx, sy):
        if objective == "distill":
            raw = L.distill_loss(L.PairBatch(x, y, tx, ty), run.proj_at(psi, k))
            _sum_terms(terms, {"distill": raw * (1.0 / len(recs)), "distill_sum": raw})
        elif objective == "nce":
            _sum_terms(terms, {"nce": L.info_nce(L.TripletBatch(x, y), run.tau(P))})
        else:
            _sum_terms(terms, {"score": L.score_distill_loss(L.PairBatch(x, y, tx, ty), w.tau)})
    total = terms.get("distill", terms.get("nce", terms.get("score")))
    return total, terms


def _retrieval_objective(run: _Run, P, recs, max_tokens):
    w = run.config.loss_weights
    comps = set(run.config.components)
    qs = [r["q"] for r in recs]
    pos = [r["d_pos"] for r in recs]
    negs = [n for r in recs for n in r["d_negs"]]
    owner = np.array([i for i, r in enumerate(recs) for _ in r["d_negs"]], dtype=np.int64)
    B = len(recs)
    sq = run.views(run.pooled(P, qs, Role.QUERY, max_tokens))
    sd = run.views(run.pooled(P, pos + negs, Role.DOCUMENT, max_tokens))
    if "distill" in comps:
        tx = run.cache.teach(qs, Role.QUERY, Instruction.GENERIC_RETRIEVAL, max_tokens)
        ty = run.cache.teach(pos, Role.DOCUMENT, Instruction.GENERIC_RETRIEVAL, max_tokens)
    psi = run.proj_view(P)
    tau = run.tau(P)
    terms: dict = {}
    weights = {"nce": w.lambda_nce, "distill": w.lambda_d, "gor": w.lambda_s}
    for (k, q), (_, d) in zip(sq, sd):
        y = d[:B]
        if "nce" in comps:
            trip = L.TripletBatch(q, y, d[B:] if len(owner) else None, owner)
            _sum_terms(terms, {"nce": L.info_nce(trip, tau)})
        if "distill" in comps:
            raw = L.distill_loss(L.PairBatch(q, y, tx, ty), run.proj_at(psi, k))
            _sum_terms(terms, {"distill": raw * (1.0 / B), "distill_sum": raw})
        if "gor" in comps:
            _sum_terms(terms, {"gor": L.gor_loss(q, y)})
    total = L.combine({k: v for k, v in terms.items() if k in weights}, weights)
    return total, terms


def _sts_objective(run: _Run, P, binding, recs, max_tokens):
    w = run.config.loss_weights
    terms: dict = {}
    if binding.kind == "scored":
        a = run.views(run.pooled(P, [r["a"] for r in recs], Role.DOCUMENT, max_tokens))
        b = run.views(run.pooled(P, [r["b"] for r in recs], Role.DOCUMENT, max_tokens))
        scores = np.array([r["score"] for r in recs])
        for (_, x), (_, y) in zip(a, b):
            batch = L.STSBatch(True, scored=L.ScoredPairBatch(x, y, scores))
            _sum_terms(terms, {"cosent": L.sts_loss(batch, w, run.proj_view(P))})
        return terms["cosent"], terms
    left_key, right_key = ("q", "d") if binding.kind == "pairs" else ("q", "d_pos")
    lefts = [r[left_key] for r in recs]
    rights = [r[right_key] for r in recs]
    negs = [n for r in recs for n in r.get("d_negs", [])]
    owner = np.array([i for i, r in enumerate(recs) for _ in r.get("d_negs", [])], dtype=np.int64)
    B = len(recs)
    x = run.views(run.pooled(P, lefts, Role.DOCUMENT, max_tokens))
    y = run.views(run.pooled(P, rights + negs, Role.DOCUMENT, max_tokens))
    tx = run.cache.teach(lefts, Role.DOCUMENT, Instruction.GENERIC_RETRIEVAL, max_tokens)
    ty = run.cache.teach(rights, Role.DOCUMENT, Instruction.GENERIC_RETRIEVAL, max_tokens)
    psi = run.proj_view(P)
    for (k, xq), (_, yd) in zip(x, y):
        trip = L.TripletBatch(xq, yd[:B], yd[B:] if len(owner) else None, owner)
        pairs = L.PairBatch(xq, yd[:B], tx, ty)
        nce = L.info_nce(trip, run.tau(P))
        dist = L.distill_loss(pairs, run.proj_at(psi, k), reduction="mean")
        _sum_terms(terms, {"nce": nce, "distill": dist, "sts": nce * w.lambda_nce + dist * w.lambda_d})
    return terms["sts"], terms


def _clustering_objective(run: _Run, P, recs, max_tokens):
    total, terms = _pair_objective(run, P, recs, max_tokens, Instruction.CLUSTERING_TOPIC, Role.DOCUMENT, "distill")
    return total, terms


def _classification_objective(run: _Run, P, recs, max_tokens):
    w = run.config.loss_weights
    B = len(recs)
    texts = [r["anchor"] for r in recs] + [r["positive"] for r in recs] + [n for r in recs for n in r["negatives"]]
    pooled = run.pooled(P, texts, Role.DOCUMENT, max_tokens)
    with_base = run.pooled(P, texts, Role.DOCUMENT, max_tokens, use_adapter=False).data
    base = with_base / np.linalg.norm(with_base, axis=1, keepdims=True)
    terms: dict = {}
    for k, e in run.views(pooled):
        batch = L.ClassBatch(e[:B], e[B:2 * B], e[2 * B:].reshape(B, 7, k))
        parts = L.classification_terms(batch, run.tau(P))
        rkd = L.relational_kd(batch.stacked(), base[:, :k])
        _sum_terms(terms, {"q2d": parts["q2d"], "d2q": parts["d2q"], "rkd": rkd,
                           "classification": (parts["q2d"] + parts["d2q"]) * w.lambda_nce + rkd * w.lambda_r})
    return terms["classification"], terms


def _objective(run: _Run, P, binding: DatasetBinding, recs, max_tokens):
    stage = run.config.stage
    if binding.kind not in STAGE_KINDS[stage]:
        raise ContractError(f"stage {stage.value} cannot consume a {binding.kind} batch")
    if stage in (Stage.DISTILL, Stage.LONG_CONTEXT):
        return _pair_objective(run, P, recs, max_tokens, Instruction.GENERIC_RETRIEVAL, Role.QUERY,
                               run.config.objective)
    if stage is Stage.ADAPTER_RETRIEVAL:
        return _retrieval_objective(run, P, recs, max_tokens)
    if stage is Stage.ADAPTER_STS:
        return _sts_objective(run, P, binding, recs, max_tokens)
    if stage is Stage.ADAPTER_CLUSTERING:
        return _clustering_objective(run, P, recs, max_tokens)
    return _classification_objective(run, P, recs, max_tokens)


# ---------------------------------------------------------------- the loop


LOG_FIELDS = ("step", "loss", "components", "lr", "wallclock")


def _trainable(run: _Run) -> dict[str, np.ndarray]:
    cfg, m = run.config, run.model
    out: dict[str, np.ndarray] = {}
    if cfg.stage.is_adapter:
        task = cfg.stage.task
        out.update({f"lora.{task.value}.{k}": v for k, v in m.adapters[task].weights.items()})
        if cfg.stage2_projection_trainable:
            out["proj.W"], out["proj.b"] = m.projection.W, m.projection.b
    else:
        out.update({f"enc.{k}": v for k, v in m.params.items()})
        if m.projection.trainable:
            out["proj.W"], out["proj.b"] = m.projection.W, m.projection.b
    return out


def _uses_tau(cfg: TrainConfig) -> bool:
    if not cfg.loss_weights.learnable_tau:
        return False
    if cfg.stage in (Stage.DISTILL, Stage.LONG_CONTEXT):
        return cfg.objective == "nce"
    if cfg.stage is Stage.ADAPTER_RETRIEVAL:
        return "nce" in cfg.components
    return cfg.stage in (Stage.ADAPTER_STS, Stage.ADAPTER_CLASSIFICATION)


def _write_back(run: _Run, values: Mapping[str, np.ndarray]) -> None:
    m = run.model
    for k, v in values.items():
        if k.startswith("enc."):
            m.params[k[4:]] = v
        elif k.startswith("lora."):
            task, name = k[5:].split(".", 1)
            m.adapters[TaskKind(task)].weights[name] = v
        elif k == "proj.W":
            m.projection = replace(m.projection, W=v)
        elif k == "proj.b":
            m.projection = replace(m.projection, b=v)


def train(
    config: TrainConfig,
    model: StudentModel,
    teacher: TeacherOracle | None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    log_path=None,
    eval_fn: Callable[[StudentModel], float] | None = None,
) -> Checkpoint:
    """Run ``config.steps`` optimisation steps (or stop early at
    ``stop_after``) and return the resulting checkpoint."""
    world = D.SyntheticWorld(config.world)
    for b in config.datasets:
        b.load(world)
    run = _Run(config, model, teacher)
    rng = np.random.default_rng([config.seed, 0x5EED])
    sampler = BatchSampler(config.datasets, config.seed)
    params = _trainable(run)
    log_tau = np.float32(np.log(config.loss_weights.tau)) if _uses_tau(config) else None
    if log_tau is not None:
        params["log_tau"] = np.asarray(log_tau, np.float32)
    opt = adam_init(params)
    start = 0
    task = config.stage.task
    snapshot: dict[str, np.ndarray] | None = None
    if resume is not None:
        start = resume.step
        rng.bit_generator.state = resume.rng_state
        sampler.load_state(resume.sampler_state)
        # stored tensors are at least 1-D; restore the scalar moments of log tau
        opt = replace(resume.optimizer,
                      m={k: v.reshape(np.shape(params.get(k, v))) for k, v in resume.optimizer.m.items()},
                      v={k: v.reshape(np.shape(params.get(k, v))) for k, v in resume.optimizer.v.items()})
        raw = {k[4:]: v for k, v in resume.extra.items() if k.startswith("raw.")}
        snap = {k[5:]: v for k, v in resume.extra.items() if k.startswith("snap.")}
        params = {k: raw.get(k, params[k]) for k in params}
        if log_tau is not None and resume.log_tau is not None:
            params["log_tau"] = np.asarray(resume.log_tau, np.float32)
        snapshot = snap or None
        _write_back(run, {k: v for k, v in params.items() if k != "log_tau"})
    names = sorted(params)
    avg_step = int(round(config.average_at * config.steps))
    averaging = config.stage is Stage.ADAPTER_RETRIEVAL and config.average_checkpoints
    end = config.steps if stop_after is None else min(config.steps, stop_after)
    history = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
    t0 = time.perf_counter()
    try:
        for step in range(start, end):
            i = sampler.pick(rng)
            binding = sampler.bindings[i]
            recs = sampler.take(i, binding.batch_size or config.batch_size)
            max_tokens = binding.max_tokens or config.max_tokens
            P = {k: Tensor(params[k], requires_grad=True) for k in names}
            total, terms = _objective(run, P, binding, recs, max_tokens)
            loss = total.item()
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at step {step}", index=step)
            grads = nx.grad(total, [P[k] for k in names])
            lr = learning_rate_at(step, config)
            params, opt, _ = optimize_step(params, dict(zip(names, grads)), lr, opt)
            if "log_tau" in params:
                params["log_tau"] = L.clamp_log_tau(params["log_tau"]).astype(np.float32)
            _write_back(run, {k: v for k, v in params.items() if k != "log_tau"})
            if averaging and step + 1 == avg_step:
                snapshot = {k: v.copy() for k, v in params.items() if k.startswith("lora.")}
            row = {"step": step + 1, "loss": loss, "lr": lr,
                   "components": {k: round(v.item(), 8) for k, v in terms.items()}}
            if eval_fn is not None and config.eval_every and (step + 1) % config.eval_every == 0:
                row["eval"] = eval_fn(run.model)
            history.append(row)
            if writer is not None:
                writer.writerow([step + 1, f"{loss:.8g}", json.dumps(row["components"], sort_keys=True),
                                 f"{lr:.6g}", f"{time.perf_counter() - t0:.3f}"])
    finally:
        if fh is not None:
            fh.close()
    step = end
    extra: dict[str, np.ndarray] = {}
    final = run.model
    if averaging and snapshot is not None:
        # keep raw weights so a resumed run continues from them, not the average
        extra.update({f"raw.{k}": v for k, v in params.items() if k.startswith("lora.")})
        extra.update({f"snap.{k}": v for k, v in snapshot.items()})
        if step == config.steps:
            final = run.model.copy()
            ad = final.adapters[task]
            earlier = replace(ad, weights={k.split(".", 2)[2]: v for k, v in snapshot.items()})
            final.adapters[task] = checkpoint_average(ad, earlier)
    return Checkpoint(
        step=step,
        model=final,
        stage=config.stage,
        log_tau=None if "log_tau" not in params else float(params["log_tau"]),
        optimizer=opt,
        rng_state=rng.bit_generator.state,
        sampler_state=sampler.state(),
        config=config.to_dict(),
        extra=extra,
        history=history,
    )


def new_student(config: TrainConfig) -> StudentModel:
    rng = np.random.default_rng([config.seed, 0xB0DE])
    params = init_encoder(config.encoder, rng)
    psi = init_projection(config.encoder, rng, config.projection_side, config.projection_trainable)
    return StudentModel(config.encoder, params, {}, psi)


def run_stage1(config: TrainConfig, teacher: TeacherOracle | None = None, base: Checkpoint | None = None,
               resume: Checkpoint | None = None, stop_after: int | None = None, log_path=None,
               eval_fn=None, long_context_projection_trainable: bool = True) -> Checkpoint:
    """Stage-one distillation.  The long-context phase continues a
    distillation checkpoint with the config's (larger) token budget and
    (smaller) rotary base."""
    if config.stage not in (Stage.DISTILL, Stage.LONG_CONTEXT):
        raise ConfigError(f"run_stage1 cannot run stage {config.stage.value}")
    teacher = teacher or teacher_for(config)
    if resume is not None:
        model = resume.model.copy()
    elif config.stage is Stage.LONG_CONTEXT:
        if base is None:
            raise ConfigError("long-context training needs a distillation checkpoint to start from")
        model = base.model.copy()
        model.config = replace(model.config, max_tokens=max(model.config.max_tokens, config.max_tokens),
                               rope_theta=config.rope_theta)
        model.projection = replace(model.projection, trainable=long_context_projection_trainable)
    else:
        model = new_student(config)
        model.config = replace(model.config, rope_theta=config.rope_theta,
                               max_tokens=max(model.config.max_tokens, config.max_tokens))
    return train(config, model, teacher, resume, stop_after, log_path, eval_fn)


def run_stage2(task: TaskKind, base: Checkpoint, config: TrainConfig, teacher: TeacherOracle | None = None,
               resume: Checkpoint | None = None, stop_after: int | None = None, log_path=None,
               eval_fn=None) -> Checkpoint:
    """Train one task adapter on a frozen backbone."""
    task = TaskKind(task)
    if config.stage.task is not task:
        raise ConfigError(f"stage {config.stage.value} does not train the {task.value} adapter")
    if base is None:
        raise ConfigError("adapter training needs a base checkpoint")
    teacher = teacher or teacher_for(config)
    if resume is not None:
        model = resume.model.copy()
    else:
        model = base.model.copy()
        rng = np.random.default_rng([config.seed, 0xADA9, list(TaskKind).index(task)])
        model.adapters[task] = init_adapter(model.config, task, rng, config.lora_rank, config.lora_alpha)
        if model.projection is not None:
            model.projection = replace(model.projection, trainable=config.stage2_projection_trainable)
    return train(config, model, teacher, resume, stop_after, log_path, eval_fn)


# ---------------------------------------------------------------- evaluation glue


class StudentEncoder:
    """Callable ``(texts, role) -> embeddings`` for the evaluation harness."""

    def __init__(self, model: StudentModel, task: TaskKind | None = None, theta: float | None = None):
        self.model = model
        self.task = task
        self.theta = theta
        self.tok = Tokenizer(model.config.vocab_size)

    def __call__(self, texts, role) -> np.ndarray:
        return embed_tokens(self.model, self.tok.encode_many(texts), Role(role), self.task, self.theta)
