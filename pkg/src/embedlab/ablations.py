"""Seeded ablation grids over the training pipeline.

Each grid cell trains (or reuses) a checkpoint, evaluates it on the
held-out retrieval benchmark and becomes one :class:`ExperimentReport`.
Reports and summaries are pure functions of the grid configuration;
wall-clock timings go to a separate sidecar file.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data as D
from . import pipeline as P
from .errors import ConfigError
from .evaluation import MetricRow, RandomEncoder, chance_ndcg_at_k, retrieval_harness
from .model import ProjectionSide, StudentModel, TaskKind

log = logging.getLogger(__name__)

ABLATIONS = ("objectives", "projection", "retrieval-components", "gor-quantization", "mrl-sweep")

# Per-objective stage-one learning rates, each the best of a sweep over
# {1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 2e-2} on the topical regime.
OBJECTIVE_LR = {"distill": 2e-2, "nce": 3e-4, "score": 1e-3}
ADAPTER_LR = 5e-3

# Table-6 row order.
COMPONENT_ROWS = (
    ("nce", "distill", "gor"),
    ("nce", "distill"),
    ("nce", "gor"),
    ("distill", "gor"),
    ("nce",),
    ("distill",),
)

# Stage-one data regimes: "topical" pairs share a subject but not
# specifics (a single-domain corpus); "mixture" adds query-style pairs.
REGIMES = {
    "topical": (("topical", 1.0),),
    "mixture": (("query", 1.0), ("topical", 1.0)),
}

PROJECTION_SETTINGS = (
    ("student-frozen", ProjectionSide.STUDENT, False),
    ("student-trainable", ProjectionSide.STUDENT, True),
    ("teacher-frozen", ProjectionSide.TEACHER, False),
    ("teacher-trainable", ProjectionSide.TEACHER, True),
)


@dataclass
class GridScale:
    """Sizes shared by every grid; shrink for smoke runs."""

    stage1_steps: int = 1000
    stage2_steps: int = 500
    pool: int = 4000
    eval_every: int = 100
    seeds: tuple[int, ...] = (0, 1, 2)
    mrl_ladder: tuple[int, ...] = (32, 16, 8, 4)


def component_label(components: Sequence[str]) -> str:
    return "+".join(components)


# ---------------------------------------------------------------- presets


def stage1_config(regime: str, objective: str, seed: int, scale: GridScale, **kw) -> P.TrainConfig:
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}; choose from {sorted(REGIMES)}")
    bindings = [
        P.DatasetBinding(f"{style}-pairs", "pairs", weight=w,
                         generate={"size": scale.pool, "seed": 100 * (i + 1) + seed, "style": style})
        for i, (style, w) in enumerate(REGIMES[regime])
    ]
    kw.setdefault("learning_rate", OBJECTIVE_LR[objective])
    kw.setdefault("eval_every", scale.eval_every)
    return P.TrainConfig(stage=P.Stage.DISTILL, steps=scale.stage1_steps, objective=objective, seed=seed,
                         datasets=bindings, **kw)


def base_config(seed: int, scale: GridScale) -> P.TrainConfig:
    """General-purpose stage-one model every adapter grid starts from."""
    return stage1_config("mixture", "distill", seed, scale, eval_every=0)


def retrieval_config(components: Sequence[str], seed: int, scale: GridScale, mrl: bool = False) -> P.TrainConfig:
    return P.TrainConfig(
        stage=P.Stage.ADAPTER_RETRIEVAL, steps=scale.stage2_steps, learning_rate=ADAPTER_LR, seed=seed,
        components=tuple(components), mrl=mrl,
        datasets=[P.DatasetBinding("triplets", "triplets", generate={"size": scale.pool, "seed": 300 + seed})],
    )


# ---------------------------------------------------------------- reports


@dataclass
class ExperimentReport:
    experiment: str
    cell: str
    seed: int
    config_hash: str
    rows: list[MetricRow]
    curve: list[tuple[int, float]] = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    wallclock: float = 0.0

    def metric(self, name: str = "ndcg@10", precision: str = "full", dim: int | None = None) -> float:
        for r in self.rows:
            if r.metric == name and r.precision == precision and (dim is None or r.dim == dim):
                return r.value
        raise KeyError((name, precision, dim))

    def to_dict(self) -> dict:
        """Serialisable form; wall-clock is left out so reports stay
        byte-identical across reruns."""
        return {
            "experiment": self.experiment,
            "cell": self.cell,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "rows": [r.to_dict() for r in self.rows],
            "curve": [[int(s), float(v)] for s, v in self.curve],
            "extras": self.extras,
        }

    @property
    def stem(self) -> str:
        return f"{self.cell}__seed{self.seed}"

    def write(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{self.stem}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(out_dir / f"{self.stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["experiment", "cell", "seed", "config_hash", "task", "dim", "precision", "metric", "value"])
            for r in self.rows:
                w.writerow([self.experiment, self.cell, self.seed, self.config_hash, r.task, r.dim, r.precision,
                            r.metric, f"{r.value:.6f}"])


@dataclass
class AblationResult:
    name: str
    reports: list[ExperimentReport]
    summary: list[dict]
    baseline: dict = field(default_factory=dict)

    def cells(self, cell: str) -> list[ExperimentReport]:
        return [r for r in self.reports if r.cell == cell]

    def mean(self, cell: str, name: str = "ndcg@10", precision: str = "full", dim: int | None = None) -> float:
        vals = [r.metric(name, precision, dim) for r in self.cells(cell)]
        if not vals:
            raise KeyError(cell)
        return float(np.mean(vals))


# ---------------------------------------------------------------- shared machinery


class RunCache:
    """Memoises trained checkpoints by config hash (and base) so grids that
    share cells, such as retrieval-components and gor-quantization, train
    each cell once.  With ``root`` set, checkpoints also persist on disk."""

    def __init__(self, root: Path | None = None):
        self.root = None if root is None else Path(root)
        self._mem: dict[str, tuple[P.Checkpoint, list]] = {}

    def get(self, key: str, build: Callable[[], P.Checkpoint]) -> P.Checkpoint:
        if key in self._mem:
            return self._mem[key][0]
        path = None if self.root is None else self.root / f"{key}.emlb"
        curve_path = None if path is None else path.with_suffix(".curve.json")
        if path is not None and path.exists():
            ck = P.Checkpoint.load(path)
            ck.history = json.loads(curve_path.read_text()) if curve_path.exists() else []
        else:
            ck = build()
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                ck.save(path)
                curve_path.write_text(json.dumps(ck.history))
        self._mem[key] = (ck, ck.history)
        return ck


class Benchmark:
    """The held-out retrieval benchmark of a world."""

    def __init__(self, world: D.WorldConfig | None = None):
        self.world = D.SyntheticWorld(world or D.WorldConfig())
        self.data = D.build_retrieval_benchmark(self.world)

    def rows(self, model: StudentModel, task: TaskKind | None = None, dims=None, binary=False,
             name: str = "retrieval") -> list[MetricRow]:
        enc = P.StudentEncoder(model, task)
        b = self.data
        return retrieval_harness(enc, b.queries, b.corpus, b.qrels, dims=dims, binary=binary, task=name)

    def ndcg(self, model: StudentModel, task: TaskKind | None = None) -> float:
        return next(r.value for r in self.rows(model, task) if r.metric == "ndcg@10")

    def chance(self) -> float:
        return chance_ndcg_at_k(self.data.qrels, len(self.data.corpus), 10)

    def random_baseline(self, dim: int = 32, seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> float:
        """Mean nDCG@10 of random-embedding encoders; one draw alone is noisy."""
        b = self.data
        vals = []
        for seed in seeds:
            rows = retrieval_harness(RandomEncoder(dim, seed), b.queries, b.corpus, b.qrels)
            vals.append(next(r.value for r in rows if r.metric == "ndcg@10"))
        return float(np.mean(vals))


def _train_stage1(cfg: P.TrainConfig, bench: Benchmark, cache: RunCache, with_curve: bool = True) -> P.Checkpoint:
    key = f"s1-{cfg.hash()}"

    def build():
        eval_fn = bench.ndcg if with_curve and cfg.eval_every else None
        return P.run_stage1(cfg, eval_fn=eval_fn)

    return cache.get(key, build)


def _train_adapter(cfg: P.TrainConfig, base: P.Checkpoint, cache: RunCache) -> P.Checkpoint:
    key = f"s2-{cfg.hash()}-{base.backbone_hash()[:16]}"
    return cache.get(key, lambda: P.run_stage2(cfg.stage.task, base, cfg))


def _curve(ck: P.Checkpoint) -> list[tuple[int, float]]:
    return [(h["step"], round(float(h["eval"]), 6)) for h in ck.history if "eval" in h]


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# ---------------------------------------------------------------- grids


def run_objectives(scale: GridScale, bench: Benchmark, cache: RunCache,
                   regimes: Sequence[str] = ("topical", "mixture")) -> AblationResult:
    reports, summary = [], []
    for regime in regimes:
        for objective in ("nce", "distill", "score"):
            cell = f"{regime}.{objective}"
            for seed in scale.seeds:
                cfg = stage1_config(regime, objective, seed, scale)
                ck, dt = _timed(lambda: _train_stage1(cfg, bench, cache))
                reports.append(ExperimentReport("objectives", cell, seed, cfg.hash(), bench.rows(ck.model),
                                                curve=_curve(ck), wallclock=dt))
            cur = np.mean([[v for _, v in r.curve] for r in reports if r.cell == cell], axis=0)
            steps = [s for s, _ in reports[-1].curve]
            for s, v in zip(steps, cur):
                summary.append({"regime": regime, "objective": objective, "step": s, "ndcg@10": round(float(v), 6)})
    return AblationResult("objectives", reports, summary)


def run_projection(scale: GridScale, bench: Benchmark, cache: RunCache) -> AblationResult:
    reports, summary = [], []
    baseline = {"random": bench.random_baseline(), "chance": bench.chance()}
    for cell, side, trainable in PROJECTION_SETTINGS:
        for seed in scale.seeds:
            cfg = stage1_config("topical", "distill", seed, scale, projection_side=side.value,
                                projection_trainable=trainable)
            ck, dt = _timed(lambda: _train_stage1(cfg, bench, cache))
            tail = [h["components"]["distill"] for h in ck.history[-50:]]
            reports.append(ExperimentReport("projection", cell, seed, cfg.hash(), bench.rows(ck.model),
                                            curve=_curve(ck), wallclock=dt,
                                            extras={"final_distill_loss": round(float(np.mean(tail)), 6)}))
        cells = [r for r in reports if r.cell == cell]
        summary.append({"setting": cell,
                        "ndcg@10": round(float(np.mean([r.metric() for r in cells])), 6),
                        "final_distill_loss": round(float(np.mean([r.extras["final_distill_loss"] for r in cells])), 6)})
    summary.append({"setting": "random-baseline", "ndcg@10": round(baseline["random"], 6), "final_distill_loss": ""})
    return AblationResult("projection", reports, summary, baseline)


def _component_grid(name: str, rows: Sequence[tuple[str, ...]], scale: GridScale, bench: Benchmark,
                    cache: RunCache, binary: bool) -> list[ExperimentReport]:
    reports = []
    for seed in scale.seeds:
        base = _train_stage1(base_config(seed, scale), bench, cache, with_curve=False)
        for comps in rows:
            cfg = retrieval_config(comps, seed, scale)
            ck, dt = _timed(lambda: _train_adapter(cfg, base, cache))
            reports.append(ExperimentReport(name, component_label(comps), seed, cfg.hash(),
                                            bench.rows(ck.model, TaskKind.RETRIEVAL, binary=binary), wallclock=dt))
    return reports


def run_retrieval_components(scale: GridScale, bench: Benchmark, cache: RunCache) -> AblationResult:
    reports = _component_grid("retrieval-components", COMPONENT_ROWS, scale, bench, cache, binary=False)
    res = AblationResult("retrieval-components", reports, [])
    for comps in COMPONENT_ROWS:
        label = component_label(comps)
        res.summary.append({"loss_configuration": label,
                            "ndcg@10": round(res.mean(label), 6),
                            "map@1000": round(res.mean(label, "map@1000"), 6)})
    return res


def run_gor_quantization(scale: GridScale, bench: Benchmark, cache: RunCache) -> AblationResult:
    rows = (("nce", "distill", "gor"), ("nce", "distill"))
    reports = _component_grid("gor-quantization", rows, scale, bench, cache, binary=True)
    res = AblationResult("gor-quantization", reports, [])
    for comps, label in zip(rows, ("with-gor", "without-gor")):
        cell = component_label(comps)
        full, binary = res.mean(cell), res.mean(cell, precision="binary")
        res.summary.append({"configuration": label, "full": round(full, 6), "binary": round(binary, 6),
                            "delta": round(binary - full, 6)})
    return res


def run_mrl_sweep(scale: GridScale, bench: Benchmark, cache: RunCache) -> AblationResult:
    reports = []
    for seed in scale.seeds:
        base = _train_stage1(base_config(seed, scale), bench, cache, with_curve=False)
        cfg = retrieval_config(("nce", "distill", "gor"), seed, scale, mrl=True)
        ck, dt = _timed(lambda: _train_adapter(cfg, base, cache))
        reports.append(ExperimentReport("mrl-sweep", "mrl", seed, cfg.hash(),
                                        bench.rows(ck.model, TaskKind.RETRIEVAL, dims=list(scale.mrl_ladder)),
                                        wallclock=dt))
    res = AblationResult("mrl-sweep", reports, [])
    for d in scale.mrl_ladder:
        res.summary.append({"dim": d, "ndcg@10": round(res.mean("mrl", dim=d), 6)})
    return res


RUNNERS = {
    "objectives": run_objectives,
    "projection": run_projection,
    "retrieval-components": run_retrieval_components,
    "gor-quantization": run_gor_quantization,
    "mrl-sweep": run_mrl_sweep,
}


def ablate(name: str, out_dir=None, scale: GridScale | None = None, cache: RunCache | None = None,
           bench: Benchmark | None = None, figures: bool = True) -> AblationResult:
    """Run the named grid; with ``out_dir`` write per-cell reports, a
    summary CSV, figures and a timing sidecar."""
    if name not in RUNNERS:
        raise ConfigError(f"unknown ablation {name!r}; valid: {', '.join(ABLATIONS)}")
    scale = scale or GridScale()
    bench = bench or Benchmark()
    cache = cache or RunCache()
    result = RUNNERS[name](scale, bench, cache)
    if out_dir is not None:
        write_result(result, Path(out_dir), figures)
    return result


def write_result(result: AblationResult, out_dir: Path, figures: bool = True) -> None:
    from .plots import plot_ablation

    out_dir.mkdir(parents=True, exist_ok=True)
    for rep in result.reports:
        rep.write(out_dir / "cells")
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(result.summary[0]))
        w.writeheader()
        w.writerows(result.summary)
    (out_dir / "summary.json").write_text(json.dumps(
        {"ablation": result.name, "summary": result.summary, "baseline": result.baseline},
        indent=2, sort_keys=True) + "\n")
    timing = {rep.stem: round(rep.wallclock, 3) for rep in result.reports}
    (out_dir / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    if figures:
        plot_ablation(result, out_dir / f"{result.name}.png")
