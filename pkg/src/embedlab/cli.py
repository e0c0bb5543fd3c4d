"""``embedlab`` command line.

Exit codes: 0 success, 2 bad configuration or input (missing file,
schema violation, id mismatch, unknown ablation), 3 non-finite loss.
Machine-readable output always goes to files; stdout carries a short
human summary.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import ablations as A
from . import data as D
from . import pipeline as P
from .checkpoint import file_sha256
from .errors import ConfigError, ContractError, DomainError, FormatError, NonFiniteError
from .evaluation import read_qrels, retrieval_harness, write_qrels
from .model import TaskKind

log = logging.getLogger("embedlab")

EXIT_OK, EXIT_CONFIG, EXIT_NONFINITE = 0, 2, 3


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return p


# ---------------------------------------------------------------- train


def _resolve_config(args) -> P.TrainConfig:
    if args.config:
        cfg = P.load_config(_need_file(args.config, "config file"))
    elif args.preset:
        cfg = P.load_preset(args.preset)
    elif args.stage:
        cfg = P.load_preset(args.stage)
    else:
        raise ConfigError("give --config, --preset or --stage")
    raw = cfg.to_dict()
    overrides = {"stage": args.stage, "seed": args.seed, "steps": args.steps, "learning_rate": args.lr,
                 "batch_size": args.batch_size, "max_tokens": args.max_tokens, "rope_theta": args.rope_theta}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if args.stage and args.config is None and args.preset is None:
        raw["stage"] = args.stage
    return P.TrainConfig.from_dict(raw)


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    base = resume = None
    if args.resume:
        resume = P.Checkpoint.load(_need_file(args.resume, "resume checkpoint"))
    if cfg.stage.is_adapter or cfg.stage is P.Stage.LONG_CONTEXT:
        if not args.base:
            raise ConfigError(f"stage {cfg.stage.value} needs --base CHECKPOINT")
        base = P.Checkpoint.load(_need_file(args.base, "base checkpoint"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_suffix(".steps.csv")
    if cfg.stage.is_adapter:
        ck = P.run_stage2(cfg.stage.task, base, cfg, resume=resume, stop_after=args.stop_after, log_path=log_path)
    else:
        ck = P.run_stage1(cfg, base=base, resume=resume, stop_after=args.stop_after, log_path=log_path,
                          long_context_projection_trainable=not args.freeze_projection)
    ck.save(out)
    print(f"stage={cfg.stage.value} steps={ck.step} final_loss={ck.history[-1]['loss']:.6f} "
          f"config={cfg.hash()} checkpoint={out} sha256={file_sha256(out)[:16]}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _read_texts(path) -> dict[str, str]:
    recs = D.read_jsonl(_need_file(path, "text file"))
    out = {}
    for r in recs:
        if not isinstance(r.get("id"), str) or not isinstance(r.get("text"), str):
            raise FormatError(f"{path}: records need string 'id' and 'text' fields")
        out[r["id"]] = r["text"]
    return out


def cmd_eval(args) -> int:
    ck = P.Checkpoint.load(_need_file(args.checkpoint, "checkpoint"))
    task = TaskKind(args.task) if args.task else None
    if task is not None and task not in ck.model.adapters:
        raise ConfigError(f"checkpoint has no {task.value} adapter")
    if args.queries or args.corpus or args.qrels:
        if not (args.queries and args.corpus and args.qrels):
            raise ConfigError("--queries, --corpus and --qrels go together")
        queries, corpus = _read_texts(args.queries), _read_texts(args.corpus)
        qrels = read_qrels(_need_file(args.qrels, "qrels file"))
    else:
        bench = D.build_retrieval_benchmark(D.SyntheticWorld(D.WorldConfig()))
        queries, corpus, qrels = bench.queries, bench.corpus, bench.qrels
    dims = args.dims or None
    full = ck.model.config.embed_dim
    if dims and any(d < 1 or d > full for d in dims):
        raise ConfigError(f"--dims entries must lie in [1, {full}]")
    encoder = P.StudentEncoder(ck.model, task)
    if args.query_role == "document":
        # symmetric encoding: both sides carry the document prefix
        student = encoder
        encoder = lambda texts, role: student(texts, "document")  # noqa: E731
    rows = retrieval_harness(encoder, queries, corpus, qrels, dims=dims,
                             binary=args.binary, k=args.k)
    rows = [r for r in rows if r.metric.startswith("ndcg")] + [r for r in rows if r.metric.startswith("map")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"checkpoint": str(args.checkpoint), "checkpoint_sha256": file_sha256(args.checkpoint),
               "task": None if task is None else task.value, "rows": [r.to_dict() for r in rows]}
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(out / "metrics.csv", "w") as fh:
        fh.write("task,dim,precision,metric,value\n")
        for r in rows:
            fh.write(f"{r.task},{r.dim},{r.precision},{r.metric},{r.value:.6f}\n")
    for r in rows:
        if r.metric.startswith("ndcg"):
            print(f"{r.metric} dim={r.dim} precision={r.precision}: {r.value:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- ablate


def cmd_ablate(args) -> int:
    if args.name not in A.ABLATIONS:
        raise ConfigError(f"unknown ablation {args.name!r}; valid names: {', '.join(A.ABLATIONS)}")
    scale = A.GridScale()
    if args.seeds:
        scale.seeds = tuple(args.seeds)
    if args.quick:
        scale.stage1_steps, scale.stage2_steps, scale.pool, scale.eval_every = 60, 40, 400, 20
        scale.seeds = scale.seeds[:1]
    cache = A.RunCache(args.cache) if args.cache else A.RunCache()
    out = Path(args.out) / args.name
    res = A.ablate(args.name, out, scale, cache, figures=not args.no_figures)
    print(f"ablation {args.name}: {len(res.reports)} cells -> {out}")
    for row in res.summary:
        print("  " + "  ".join(f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    world = D.SyntheticWorld(D.WorldConfig(seed=args.world_seed))
    out = Path(args.out)
    if args.kind == "benchmark":
        out.mkdir(parents=True, exist_ok=True)
        b = D.build_retrieval_benchmark(world, queries=args.size, seed=args.seed)
        D.write_jsonl(out / "queries.jsonl", [{"id": k, "text": v} for k, v in b.queries.items()])
        D.write_jsonl(out / "corpus.jsonl", [{"id": k, "text": v} for k, v in b.corpus.items()])
        write_qrels(out / "qrels.tsv", b.qrels)
        print(f"benchmark: {len(b.queries)} queries, {len(b.corpus)} documents -> {out}")
        return EXIT_OK
    spec = {"size": args.size, "seed": args.seed}
    if args.kind == "pairs":
        spec.update(style=args.style, long=args.long)
    recs = P.generate_records(world, args.kind, spec)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.write_jsonl(out, recs, args.kind)
    print(f"{args.kind}: {len(recs)} records -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- inspect


def cmd_inspect(args) -> int:
    path = _need_file(args.checkpoint, "checkpoint")
    ck = P.Checkpoint.load(path)
    m = ck.model
    info = {
        "file_sha256": file_sha256(path),
        "stage": ck.stage.value,
        "step": ck.step,
        "encoder": m.config.to_dict(),
        "backbone_sha256": ck.backbone_hash(),
        "parameters": int(sum(v.size for v in m.params.values())),
        "adapters": {t.value: {"rank": a.rank, "alpha": a.alpha,
                               "parameters": int(sum(v.size for v in a.weights.values()))}
                     for t, a in m.adapters.items()},
        "projection": None if m.projection is None else {
            "side": m.projection.side.value, "trainable": m.projection.trainable,
            "shape": list(m.projection.W.shape)},
        "tau": None if ck.log_tau is None else float(np.exp(ck.log_tau)),
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="embedlab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", help="JSON TrainConfig (schema_version 1)")
    t.add_argument("--preset", choices=P.PRESETS, help="start from a shipped preset")
    t.add_argument("--stage", choices=[s.value for s in P.Stage])
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-tokens", type=int)
    t.add_argument("--rope-theta", type=float)
    t.add_argument("--base", help="checkpoint to start from (adapter and long-context stages)")
    t.add_argument("--resume", help="continue an interrupted run from its checkpoint")
    t.add_argument("--stop-after", type=int, help="stop at this step (resumable)")
    t.add_argument("--freeze-projection", action="store_true", help="long-context: keep the projection fixed")
    t.add_argument("--out", default="checkpoint.emlb")
    t.add_argument("--log", help="step log CSV (default: next to the checkpoint)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", choices=[t.value for t in TaskKind], help="adapter to apply")
    e.add_argument("--queries", help="JSONL with id/text records")
    e.add_argument("--corpus", help="JSONL with id/text records")
    e.add_argument("--qrels", help="TSV: query_id doc_id grade")
    e.add_argument("--dims", type=_ints, help="comma-separated truncation ladder, e.g. 32,16,8")
    e.add_argument("--binary", action="store_true", help="also score binarised embeddings")
    e.add_argument("--query-role", choices=["query", "document"], default="query",
                   help="prefix for query texts; 'document' encodes both sides symmetrically")
    e.add_argument("--k", type=int, default=10)
    e.add_argument("--out", default="eval-out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("name", help=f"one of: {', '.join(A.ABLATIONS)}")
    a.add_argument("--out", default="reports")
    a.add_argument("--seeds", type=_ints)
    a.add_argument("--cache", help="directory for reusable checkpoints")
    a.add_argument("--quick", action="store_true", help="tiny grid for smoke testing")
    a.add_argument("--no-figures", action="store_true")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--kind", required=True, choices=[*D.SCHEMAS, "benchmark"])
    g.add_argument("--size", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--world-seed", type=int, default=0)
    g.add_argument("--style", choices=D.PAIR_STYLES, default="query")
    g.add_argument("--long", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    i = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = int(os.environ.get("EMBEDLAB_THREADS", "1"))
    except ValueError:
        print("error: EMBEDLAB_THREADS must be an integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=max(1, threads)):
            return args.func(args)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ConfigError, FormatError, ContractError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
