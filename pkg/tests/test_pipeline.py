import hashlib
import json

import numpy as np
import pytest

from embedlab import pipeline as P
from embedlab.errors import ConfigError, ContractError
from embedlab.model import EncoderConfig, Instruction, Role, TaskKind, encode
from embedlab.tokenizer import Tokenizer


def _pairs(n=600, seed=1, style="query"):
    return P.DatasetBinding("pairs", "pairs", generate={"size": n, "seed": seed, "style": style})


def small_config(stage=P.Stage.DISTILL, datasets=None, **kw):
    """A 16-dim student and 32-dim teacher on a few hundred records."""
    enc = EncoderConfig(embed_dim=16, teacher_dim=32, ffn_dim=32)
    kw.setdefault("steps", 200)
    kw.setdefault("batch_size", 16)
    kw.setdefault("max_tokens", 48)
    kw.setdefault("learning_rate", 1e-2)
    return P.TrainConfig(stage=stage, encoder=enc, datasets=datasets or [_pairs()], **kw)


def _triplets(n=400):
    return P.DatasetBinding("trip", "triplets", generate={"size": n, "seed": 3})


def _digest(arrays):
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k]).tobytes())
    return h.hexdigest()


def _ckpt_digest(ck):
    return _digest(ck.tensors())


@pytest.fixture(scope="module")
def base():
    return P.run_stage1(small_config(steps=60))


# ---------------------------------------------------------------- configuration


class TestConfig:
    def test_roundtrip(self):
        cfg = small_config(seed=4, components=("nce", "gor"), stage=P.Stage.ADAPTER_RETRIEVAL,
                           datasets=[_triplets()])
        again = P.TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again.to_dict() == cfg.to_dict()
        assert again.hash() == cfg.hash()

    def test_hash_changes(self):
        assert small_config(seed=1).hash() != small_config(seed=2).hash()

    def test_unknown_field(self):
        d = small_config().to_dict()
        d["colour"] = "red"
        with pytest.raises(ConfigError):
            P.TrainConfig.from_dict(d)

    @pytest.mark.parametrize("kw", [{"learning_rate": 0.0}, {"steps": 0}, {"objective": "mse"},
                                    {"components": ("nce", "other")}, {"average_at": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            small_config(**kw)

    def test_wrong_kind_for_stage(self):
        with pytest.raises(ConfigError):
            small_config(stage=P.Stage.ADAPTER_CLASSIFICATION, datasets=[_pairs()])

    def test_weights(self):
        with pytest.raises(ConfigError):
            P.DatasetBinding("x", "pairs", weight=-1.0, generate={"size": 1})
        with pytest.raises(ConfigError):
            small_config(datasets=[P.DatasetBinding("x", "pairs", weight=0.0, generate={"size": 1})])

    @pytest.mark.parametrize("name", P.PRESETS)
    def test_presets_load(self, name):
        cfg = P.load_preset(name)
        assert cfg.stage.value == name
        assert cfg.steps <= 2000

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            P.load_preset("nope")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            P.load_config(tmp_path / "absent.json")


# ---------------------------------------------------------------- sampling


def _bindings(weights):
    return [P.DatasetBinding(f"b{i}", "pairs", weight=w, records=[{"q": str(i), "d": str(i)}] * 5)
            for i, w in enumerate(weights)]


class TestSampler:
    def test_single_binding(self):
        s = P.BatchSampler(_bindings([1.0]), seed=0)
        rng = np.random.default_rng(0)
        assert {s.pick(rng) for _ in range(100)} == {0}

    def test_zero_weight_never_drawn(self):
        s = P.BatchSampler(_bindings([1.0, 0.0]), seed=0)
        rng = np.random.default_rng(0)
        assert {s.pick(rng) for _ in range(2000)} == {0}

    def test_frequency(self):
        s = P.BatchSampler(_bindings([1.0, 3.0]), seed=0)
        rng = np.random.default_rng(0)
        freq = np.mean([s.pick(rng) == 1 for _ in range(10_000)])
        assert abs(freq - 0.75) <= 0.02

    def test_overrides(self):
        b = _bindings([1.0])
        b[0].batch_size, b[0].max_tokens = 3, 17
        binding, recs, bs, mt = P.sample_batch(b, 0, np.random.default_rng(0))
        assert (len(recs), bs, mt) == (3, 3, 17)

    def test_wraps_with_reshuffle(self):
        recs = [{"q": str(i), "d": str(i)} for i in range(5)]
        s = P.BatchSampler([P.DatasetBinding("b", "pairs", records=recs)], seed=0)
        first, second = s.take(0, 5), s.take(0, 5)
        assert sorted(r["q"] for r in first) == sorted(r["q"] for r in second)
        assert s.state()["epoch"] == [1]

    def test_no_bindings(self):
        with pytest.raises(ConfigError):
            P.BatchSampler([], seed=0)


# ---------------------------------------------------------------- optimiser


class TestAdam:
    def test_zero_grads(self):
        p = {"w": np.array([1.0, -2.0])}
        st = P.adam_init(p)
        st.m["w"][:] = [0.5, 0.5]
        new, st2, ok = P.optimize_step(p, {"w": np.zeros(2)}, 0.1, st)
        assert ok
        np.testing.assert_allclose(st2.m["w"], [0.45, 0.45])
        # moment decay alone still moves p; with fresh moments it does not
        new, _, _ = P.optimize_step(p, {"w": np.zeros(2)}, 0.1, P.adam_init(p))
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_quadratic_bowl(self):
        p = {"w": np.random.default_rng(0).standard_normal(8)}
        st = P.adam_init(p)
        for _ in range(500):
            p, st, _ = P.optimize_step(p, {"w": 2 * p["w"]}, 1e-2, st)
        assert np.linalg.norm(p["w"]) < 1e-3

    def test_non_finite_rejected(self):
        p = {"w": np.ones(3)}
        st = P.adam_init(p)
        new, st2, ok = P.optimize_step(p, {"w": np.array([1.0, np.nan, 0.0])}, 0.1, st)
        assert not ok and st2 is st
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_key_mismatch(self):
        with pytest.raises(ContractError):
            P.optimize_step({"w": np.ones(2)}, {"v": np.ones(2)}, 0.1, P.adam_init({"w": np.ones(2)}))

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            P.optimize_step({"w": np.ones(2)}, {"w": np.ones(3)}, 0.1, P.adam_init({"w": np.ones(2)}))

    def test_warmup(self):
        cfg = small_config(steps=1000, learning_rate=1.0)
        assert P.learning_rate_at(0, cfg) == pytest.approx(0.1)
        assert P.learning_rate_at(9, cfg) == 1.0
        assert P.learning_rate_at(999, cfg) == 1.0


# ---------------------------------------------------------------- stage one


@pytest.fixture(scope="module")
def stage1_run():
    cfg = small_config(steps=200)
    teacher = P.teacher_for(cfg)
    before = _digest(teacher.arrays())
    return cfg, teacher, before, P.run_stage1(cfg, teacher)


class TestStageOne:
    def test_distill_loss_halves(self, stage1_run):
        _, _, _, ck = stage1_run
        losses = [r["components"]["distill"] for r in ck.history]
        assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])

    def test_teacher_unchanged(self, stage1_run):
        _, teacher, before, _ = stage1_run
        assert _digest(teacher.arrays()) == before

    def test_deterministic(self, stage1_run):
        cfg, _, _, ck = stage1_run
        again = P.run_stage1(P.TrainConfig.from_dict(cfg.to_dict()))
        assert _ckpt_digest(again) == _ckpt_digest(ck)

    def test_long_context_needs_base(self):
        with pytest.raises(ConfigError):
            P.run_stage1(small_config(stage=P.Stage.LONG_CONTEXT))

    def test_long_context_switches_theta(self, base):
        cfg = small_config(stage=P.Stage.LONG_CONTEXT, steps=3, rope_theta=2500.0, max_tokens=96)
        ck = P.run_stage1(cfg, base=base)
        assert ck.model.config.rope_theta == 2500.0
        assert ck.model.config.max_tokens == 96
        assert ck.model.projection.trainable

    def test_resume_equivalence(self, tmp_path):
        cfg = small_config(steps=30)
        full = P.run_stage1(cfg)
        half = P.run_stage1(small_config(steps=30), stop_after=12)
        half.save(tmp_path / "h.emlb")
        resumed = P.run_stage1(small_config(steps=30), resume=P.Checkpoint.load(tmp_path / "h.emlb"))
        assert resumed.step == 30
        assert _ckpt_digest(resumed) == _ckpt_digest(full)

    def test_step_log(self, tmp_path):
        P.run_stage1(small_config(steps=3), log_path=tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == ",".join(P.LOG_FIELDS)
        assert len(lines) == 4


# ---------------------------------------------------------------- stage two


class _SpyTeacher:
    def __init__(self, inner):
        self.inner = inner
        self.instructions = set()

    def embed_batch(self, tokens, role, instruction):
        self.instructions.add(instruction)
        return self.inner.embed_batch(tokens, role, instruction)


class TestStageTwo:
    def _retrieval(self, **kw):
        kw.setdefault("steps", 20)
        return small_config(stage=P.Stage.ADAPTER_RETRIEVAL, datasets=[_triplets()], lora_rank=4,
                            lora_alpha=4.0, **kw)

    def test_backbone_frozen(self, base):
        ck = P.run_stage2(TaskKind.RETRIEVAL, base, self._retrieval())
        assert ck.backbone_hash() == base.backbone_hash()
        np.testing.assert_array_equal(ck.model.projection.W, base.model.projection.W)
        np.testing.assert_array_equal(ck.model.projection.b, base.model.projection.b)

    def test_unfrozen_projection_flag(self, base):
        ck = P.run_stage2(TaskKind.RETRIEVAL, base, self._retrieval(stage2_projection_trainable=True))
        assert ck.backbone_hash() == base.backbone_hash()
        assert not np.array_equal(ck.model.projection.W, base.model.projection.W)

    @pytest.mark.parametrize("stage,task,data", [
        (P.Stage.ADAPTER_STS, TaskKind.TEXT_MATCHING,
         lambda: [P.DatasetBinding("s", "scored", generate={"size": 200, "seed": 1}), _pairs(200)]),
        (P.Stage.ADAPTER_CLUSTERING, TaskKind.CLUSTERING, lambda: [_pairs(200, style="topical")]),
        (P.Stage.ADAPTER_CLASSIFICATION, TaskKind.CLASSIFICATION,
         lambda: [P.DatasetBinding("c", "class", generate={"size": 100, "seed": 1})]),
    ])
    def test_every_task_freezes_backbone(self, base, stage, task, data):
        cfg = small_config(stage=stage, datasets=data(), steps=4, batch_size=4, lora_rank=4, lora_alpha=4.0)
        ck = P.run_stage2(task, base, cfg)
        assert ck.backbone_hash() == base.backbone_hash()
        assert set(ck.model.adapters) == {task}

    def test_adapter_isolated(self, base):
        ck = P.run_stage2(TaskKind.RETRIEVAL, base, self._retrieval())
        text = Tokenizer(512).encode("w001 w002 w003")
        np.testing.assert_array_equal(encode(ck.model, text, Role.QUERY), encode(base.model, text, Role.QUERY))
        assert not np.array_equal(encode(ck.model, text, Role.QUERY, TaskKind.RETRIEVAL),
                                  encode(base.model, text, Role.QUERY))

    def test_averaged_adapter(self, base):
        cfg = self._retrieval(steps=10, average_at=0.4)
        ck = P.run_stage2(TaskKind.RETRIEVAL, base, cfg)
        raw = {k[len("raw.lora.retrieval."):]: v for k, v in ck.extra.items() if k.startswith("raw.")}
        snap = {k[len("snap.lora.retrieval."):]: v for k, v in ck.extra.items() if k.startswith("snap.")}
        assert raw and set(raw) == set(snap) == set(ck.model.adapters[TaskKind.RETRIEVAL].weights)
        early = P.run_stage2(TaskKind.RETRIEVAL, base, cfg, stop_after=4)
        for k, v in ck.model.adapters[TaskKind.RETRIEVAL].weights.items():
            np.testing.assert_array_equal(snap[k], early.model.adapters[TaskKind.RETRIEVAL].weights[k])
            np.testing.assert_array_equal(v, ((raw[k] + snap[k]) / 2).astype(v.dtype))

    def test_clustering_uses_topic_instruction(self, base):
        cfg = small_config(stage=P.Stage.ADAPTER_CLUSTERING, datasets=[_pairs(100, style="topical")],
                           steps=3, batch_size=8, lora_rank=4, lora_alpha=4.0)
        spy = _SpyTeacher(P.teacher_for(cfg))
        P.run_stage2(TaskKind.CLUSTERING, base, cfg, teacher=spy)
        assert spy.instructions == {Instruction.CLUSTERING_TOPIC}

    def test_wrong_batch_kind(self, base):
        cfg = small_config(stage=P.Stage.ADAPTER_CLUSTERING, datasets=[_pairs(50)], steps=2,
                           lora_rank=4, lora_alpha=4.0)
        cfg.datasets = [_triplets(50)]
        with pytest.raises(ContractError):
            P.run_stage2(TaskKind.CLUSTERING, base, cfg)

    def test_wrong_task(self, base):
        with pytest.raises(ConfigError):
            P.run_stage2(TaskKind.CLUSTERING, base, self._retrieval())

    def test_learnable_tau_moves(self, base):
        ck = P.run_stage2(TaskKind.RETRIEVAL, base, self._retrieval(steps=5))
        assert ck.log_tau is not None and ck.log_tau != pytest.approx(np.log(0.02), abs=1e-9)
        assert np.log(0.005) - 1e-6 <= ck.log_tau <= 1e-6

    def test_prefix_asymmetry(self, base):
        ck = P.run_stage2(TaskKind.RETRIEVAL, base, self._retrieval())
        text = Tokenizer(512).encode("w010 w011 w012 w013")
        q = encode(ck.model, text, Role.QUERY, TaskKind.RETRIEVAL)
        d = encode(ck.model, text, Role.DOCUMENT, TaskKind.RETRIEVAL)
        assert float(q @ d) < 1 - 1e-6

    def test_resume_across_averaging(self, base, tmp_path):
        cfg = self._retrieval(steps=12)
        full = P.run_stage2(TaskKind.RETRIEVAL, base, cfg)
        part = P.run_stage2(TaskKind.RETRIEVAL, base, self._retrieval(steps=12), stop_after=8)
        part.save(tmp_path / "p.emlb")
        rest = P.run_stage2(TaskKind.RETRIEVAL, base, self._retrieval(steps=12),
                            resume=P.Checkpoint.load(tmp_path / "p.emlb"))
        assert _ckpt_digest(rest) == _ckpt_digest(full)


# ---------------------------------------------------------------- presets


def _moving_average(x, w=50):
    return np.convolve(x, np.ones(w) / w, mode="valid")


@pytest.fixture(scope="module")
def preset_base():
    return P.run_stage1(P.load_preset("distill"), stop_after=200)


@pytest.mark.slow
@pytest.mark.parametrize("name", P.PRESETS)
def test_preset_loss_trend(name, preset_base):
    cfg = P.load_preset(name)
    if cfg.stage is P.Stage.DISTILL:
        ck = P.run_stage1(cfg, stop_after=500)
    elif cfg.stage is P.Stage.LONG_CONTEXT:
        ck = P.run_stage1(cfg, base=preset_base, stop_after=500)
    else:
        ck = P.run_stage2(cfg.stage.task, preset_base, cfg, stop_after=500)
    ma = _moving_average([r["loss"] for r in ck.history])
    # ma[i] averages steps i+1 .. i+50, so ma[0] ends at step 50
    assert ma[450] < ma[0]
