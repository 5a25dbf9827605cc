import csv
import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tagi import tensor as T
from tagi.errors import ConfigError, TrainingFailure
from tagi.hypernet import Tagi
from tagi.model import PAD_ID
from tagi.pipeline import state_digest
from tagi.rng import Rng
from tagi.tasks import build_suite
from tagi.tensor import Tensor
from tagi.training import (
    AdamW, DivergenceGuard, EncodedTask, MetricsLog, TeacherCache, TrainConfig, encode_suite_tasks,
    LossBreakdown, finetune_batch, finetune_loss, finetune_params, finetune_step, lambda2_value, lr_at,
    pretrain_loss, pretrain_params, pretrain_step, sample_splits, sigmoid, teacher_token_accuracy,
    train_teacher,
)

from conftest import SMALL, TINY

# room for (instruction ; SEP ; input) sequences
TINY = dataclasses.replace(TINY, max_len=96)


@pytest.fixture(scope="module")
def suite():
    return build_suite(0, n_train_tasks=3, n_train_instances=20, n_eval_instances=5)


@pytest.fixture(scope="module")
def encoded(suite):
    return encode_suite_tasks(suite, "def")


def perturbed_model(cfg=TINY, seed=0):
    """Hypernetwork with its zero-initialized head perturbed, so every term has gradient."""
    model = Tagi(cfg, Rng(seed))
    g = np.random.default_rng(seed)
    for p in model.hyper.parameters():
        if not np.any(p.data):
            p.data = 0.05 * g.standard_normal(p.shape)
    return model


def random_teachers(model, encoded, seed=0):
    out = {}
    for i, tid in enumerate(encoded):
        res = train_teacher(model, encoded[tid], TrainConfig(seed=seed), steps=0)
        for m in res.adapters.lora.values():
            m.B.data = 0.1 * np.random.default_rng(i).standard_normal(m.B.shape)
        out[tid] = res.adapters
    return out


def grads(model, fn):
    params = finetune_params(model)
    T.reset_tape()
    total, br = fn()
    T.backward(total)
    g = {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for n, p in params}
    for _, p in params:
        p.grad = None
    return g, br


# ---------------------------------------------------------------- schedule / optimizer

def test_lr_schedule_shape():
    assert lr_at(0, 100, 1.0, 0.1) == pytest.approx(0.1)
    assert lr_at(9, 100, 1.0, 0.1) == pytest.approx(1.0)
    assert lr_at(10, 100, 1.0, 0.1) == pytest.approx(1.0)
    assert lr_at(55, 100, 1.0, 0.1) == pytest.approx(0.5)
    assert lr_at(99, 100, 1.0, 0.1) == pytest.approx(1 / 90)
    assert lr_at(0, 10, 2.0, 0.0) == pytest.approx(2.0)


def reference_adamw(x, g_seq, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar loop, one coordinate at a time."""
    x = list(x)
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    for t, g in enumerate(g_seq, start=1):
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            x[i] = x[i] - lr * (mh / (math.sqrt(vh) + eps) + wd * x[i])
    return x


@given(st.integers(0, 10_000))
def test_adamw_matches_scalar_reference(seed):
    r = np.random.default_rng(seed)
    x0 = r.standard_normal(5)
    gs = [r.standard_normal(5) * 0.1 for _ in range(4)]
    p = Tensor(x0.copy(), requires_grad=True)
    opt = AdamW([("p", p)], weight_decay=0.01, grad_clip=None)
    for g in gs:
        p.grad = g.copy()
        opt.step(0.01)
    np.testing.assert_allclose(p.data, reference_adamw(x0, gs, 0.01, 0.01), rtol=1e-12, atol=1e-14)


def test_adamw_clips_to_unit_norm():
    p = Tensor(np.zeros(4), requires_grad=True)
    q = Tensor(np.zeros(4), requires_grad=True)
    opt = AdamW([("p", p)], weight_decay=0.0, grad_clip=1.0)
    ref = AdamW([("q", q)], weight_decay=0.0, grad_clip=None)
    p.grad = np.array([3.0, 4.0, 0.0, 0.0])
    q.grad = np.array([0.6, 0.8, 0.0, 0.0])
    assert opt.step(0.1) == pytest.approx(5.0)
    ref.step(0.1)
    np.testing.assert_allclose(opt.m["p"], ref.m["q"])


def test_adamw_state_roundtrip():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = AdamW([("p", p)])
    p.grad = np.array([1.0, -2.0, 0.5])
    opt.step(0.1)
    other = AdamW([("p", Tensor(p.data.copy(), requires_grad=True))])
    other.load_state_dict(opt.state_dict(), opt.t)
    assert other.t == 1
    np.testing.assert_array_equal(other.m["p"], opt.m["p"])
    np.testing.assert_array_equal(other.v["p"], opt.v["p"])


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lambda1=-1)
    with pytest.raises(ConfigError):
        TrainConfig(lambda2_mode="learned")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=6, tasks_per_batch=4)


# ---------------------------------------------------------------- loss algebra

def test_lambda2_is_half_at_zero_ins():
    assert lambda2_value(TrainConfig(), 0.0) == 0.5
    assert lambda2_value(TrainConfig(lambda2_mode="constant", lambda2_const=0.3), 9.0) == 0.3
    assert sigmoid(2.0) == pytest.approx(1 / (1 + math.exp(-2)))


_ENC = encode_suite_tasks(build_suite(0, n_train_tasks=3, n_train_instances=20), "def")
_MODEL = perturbed_model(TINY, 1)
_TEACHERS = random_teachers(_MODEL, _ENC)


@given(st.integers(0, 1000), st.floats(0.0, 10.0))
def test_total_is_weighted_sum(step, lam1):
    enc, model, teachers = _ENC, _MODEL, _TEACHERS
    cfg = TrainConfig(lambda1=lam1)
    batch = finetune_batch(enc, cfg, step)
    with T.no_grad():
        total, br = finetune_loss(model, batch, cfg, teachers)
    assert br.lambda2 == pytest.approx(1 / (1 + math.exp(-br.l_ins)))
    assert total.item() == pytest.approx(br.l_pred + lam1 * br.l_kl + br.lambda2 * br.l_ins, rel=1e-12)
    assert br.l_total == total.item()
    assert br.l_kl >= 0 and br.l_ins >= 0


def test_gradient_is_sum_of_term_gradients(encoded):
    model = perturbed_model(TINY, 2)
    teachers = random_teachers(model, encoded)
    batch = finetune_batch(encoded, TrainConfig(), 0)
    full = TrainConfig(lambda1=5.0)
    g_all, br = grads(model, lambda: finetune_loss(model, batch, full, teachers))
    parts = {}
    for term in ("pred", "kl", "ins"):
        c = TrainConfig(lambda1=5.0, use_pred=term == "pred", use_kl=term == "kl",
                        use_ins=term == "ins", lambda2_mode="constant", lambda2_const=br.lambda2)
        parts[term], _ = grads(model, lambda: finetune_loss(model, batch, c, teachers))
    for n in g_all:
        np.testing.assert_allclose(g_all[n], parts["pred"][n] + parts["kl"][n] + parts["ins"][n],
                                   rtol=1e-9, atol=1e-12)


def test_disabled_term_contributes_nothing(encoded):
    model = perturbed_model(TINY, 3)
    teachers = random_teachers(model, encoded)
    batch = finetune_batch(encoded, TrainConfig(), 1)
    with T.no_grad():
        total, br = finetune_loss(model, batch, TrainConfig(use_kl=False, use_ins=False), teachers)
    assert br.l_kl == br.l_ins == br.lambda2 == 0.0
    assert total.item() == br.l_pred


def test_all_terms_disabled_is_config_error(encoded):
    model = perturbed_model(TINY, 3)
    cfg = TrainConfig(use_pred=False, use_kl=False, use_ins=False)
    with pytest.raises(ConfigError):
        finetune_loss(model, finetune_batch(encoded, TrainConfig(), 0), cfg, {})


def test_missing_teacher_is_config_error(encoded):
    model = perturbed_model(TINY, 3)
    teachers = random_teachers(model, encoded)
    batch = finetune_batch(encoded, TrainConfig(), 0)
    teachers.pop(batch.task_ids[0])
    with pytest.raises(ConfigError, match=batch.task_ids[0]):
        finetune_loss(model, batch, TrainConfig(), teachers)
    # pred-only training needs no teachers at all
    finetune_loss(model, batch, TrainConfig(use_kl=False, use_ins=False), None)


def test_ins_is_zero_when_generated_equals_teacher(encoded):
    model = perturbed_model(TINY, 4)
    batch = finetune_batch(encoded, TrainConfig(), 0)
    with T.no_grad():
        gen = model.generate_adapters(model.encode_instruction(batch.instr))
    teachers = {}
    for u, tid in enumerate(batch.task_ids):
        ad = random_teachers(model, {tid: encoded[tid]})[tid]
        for k, m in ad.lora.items():
            m.A.data = gen.lora[k].A.data[u].copy()
            m.B.data = gen.lora[k].B.data[u].copy()
        teachers[tid] = ad
    with T.no_grad():
        _, br = finetune_loss(model, batch, TrainConfig(use_kl=False), teachers)
    assert br.l_ins == pytest.approx(0.0, abs=1e-20)
    assert br.lambda2 == 0.5


def test_teacher_cache_matches_direct_logits(encoded):
    model = perturbed_model(TINY, 5)
    teachers = random_teachers(model, encoded)
    cache = TeacherCache(model, encoded, teachers)
    batch = finetune_batch(encoded, TrainConfig(), 3)
    with T.no_grad():
        a, bra = finetune_loss(model, batch, TrainConfig(), teachers)
        b, brb = finetune_loss(model, batch, TrainConfig(), teachers, cache.batch(batch, TINY.vocab_size))
    assert bra.l_kl == pytest.approx(brb.l_kl, rel=1e-10)


# ---------------------------------------------------------------- batching

def test_finetune_batch_groups_tasks(encoded):
    cfg = TrainConfig(batch_size=8, tasks_per_batch=2)
    b = finetune_batch(encoded, cfg, 7)
    assert len(set(b.task_ids)) == 2
    assert list(b.index) == [0, 0, 0, 0, 1, 1, 1, 1]
    assert b.src.shape[0] == b.tgt.shape[0] == 8
    for j, (tid, i) in enumerate(b.instance_ids):
        assert tid == b.task_ids[b.index[j]]
        n = len(encoded[tid].targets[i])
        assert list(b.tgt[j, :n]) == encoded[tid].targets[i]
        assert np.all(b.tgt[j, n:] == PAD_ID)
    again = finetune_batch(encoded, cfg, 7)
    assert again.instance_ids == b.instance_ids


# ---------------------------------------------------------------- stage behaviour

def test_finetune_keeps_backbone_frozen(encoded):
    model = perturbed_model(TINY, 6)
    teachers = random_teachers(model, encoded)
    before_bb = state_digest(model.backbone.state_dict())
    before_h = state_digest(model.hyper.state_dict())
    cfg = TrainConfig()
    opt = AdamW(finetune_params(model), cfg.weight_decay)
    for step in range(3):
        finetune_step(model, opt, finetune_batch(encoded, cfg, step), cfg, teachers, 1e-3)
    assert state_digest(model.backbone.state_dict()) == before_bb
    assert state_digest(model.hyper.state_dict()) != before_h


def test_finetune_params_exclude_fusion_when_disabled():
    model = Tagi(TINY, Rng(0), fusion_enabled=False)
    names = [n for n, _ in finetune_params(model)]
    assert names and not any("fusion" in n for n in names)
    assert not any(n.startswith("backbone/") for n in names)


def test_teacher_is_deterministic(suite):
    enc = EncodedTask.build(suite.meta_train[0], "def", 10)
    model = Tagi(TINY, Rng(0))
    a = train_teacher(model, enc, TrainConfig(teacher_lr=1e-3), steps=5)
    b = train_teacher(model, enc, TrainConfig(teacher_lr=1e-3), steps=5)
    np.testing.assert_array_equal(a.adapters.flatten().data, b.adapters.flatten().data)
    assert a.final_loss == b.final_loss and a.steps == 5


def test_teacher_trains_only_lora(suite):
    enc = EncodedTask.build(suite.meta_train[0], "def", 10)
    model = Tagi(TINY, Rng(0))
    before = state_digest(model.state_dict())
    res = train_teacher(model, enc, TrainConfig(teacher_lr=1e-2), steps=5)
    assert state_digest(model.state_dict()) == before
    assert any(np.any(m.B.data) for m in res.adapters.lora.values())


def test_zero_step_teacher_equals_frozen_base(suite):
    enc = EncodedTask.build(suite.meta_train[0], "def", 10)
    model = Tagi(TINY, Rng(0))
    res = train_teacher(model, enc, TrainConfig(), steps=0)
    assert all(not np.any(m.B.data) for m in res.adapters.lora.values())
    idx = list(range(10))
    assert teacher_token_accuracy(model, enc, res.adapters, idx) == teacher_token_accuracy(model, enc, None, idx)


def test_divergence_guard():
    g = DivergenceGuard("t")
    g.update(0, 1.0)
    for s in range(1, 100):
        g.update(s, 10.5)
    g.update(100, 9.0)  # one step back under the bar resets the count
    for s in range(101, 200):
        g.update(s, 11.0)
    with pytest.raises(TrainingFailure, match="diverged at step 200"):
        g.update(200, 11.0)


def test_pretrain_initial_loss_near_uniform():
    model = Tagi(SMALL, Rng(0))
    cfg = TrainConfig(batch_size=16)
    with T.no_grad():
        loss = pretrain_loss(model, sample_splits(cfg, 0, 0)).item()
    assert abs(loss - math.log(SMALL.vocab_size)) < 0.2 * math.log(SMALL.vocab_size)


def test_pretrain_loss_decreases():
    model = Tagi(TINY, Rng(0))
    cfg = TrainConfig(batch_size=8, window_len=24, seed=0)
    opt = AdamW(pretrain_params(model), cfg.weight_decay)
    losses = []
    for step in range(500):
        br, _ = pretrain_step(model, opt, sample_splits(cfg, 0, step), lr_at(step, 500, 1e-3, 0.02))
        losses.append(br.l_pred)
    assert np.mean(losses[-10:]) < 0.9 * losses[0]


def test_pretrain_splits_are_seeded():
    cfg = TrainConfig()
    a = sample_splits(cfg, 0, 5)
    assert a == sample_splits(cfg, 0, 5)
    assert a != sample_splits(cfg, 0, 6)
    for s in a:
        assert len(s.a) + len(s.b) + len(s.c) == cfg.window_len


# ---------------------------------------------------------------- metrics

def test_metrics_csv(tmp_path):
    path = tmp_path / "m.csv"
    log = MetricsLog(str(path), "abc123")
    log.log(0, "finetune", "copy+reverse", LossBreakdown(1.0, 2.0, 3.0, 0.5, 12.5), 0.7, 1e-4)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["step", "stage", "task_id", "l_pred", "l_kl", "l_ins", "lambda2",
                             "l_total", "grad_norm", "lr", "wall_ms", "config_hash"]
    assert rows[0]["wall_ms"] == "" and rows[0]["config_hash"] == "abc123"
    assert float(rows[0]["l_total"]) == 12.5
    MetricsLog(str(path), "abc123").log(1, "teacher", "copy", LossBreakdown(1, 0, 0, 0, 1), 0.1, 0.1)
    assert len(list(csv.DictReader(open(path)))) == 2
