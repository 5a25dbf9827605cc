"""Teacher LoRA tuning, hypernetwork pretraining and distillation finetuning."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, TrainingFailure
from .hypernet import Tagi
from .model import BOS_ID, PAD_ID, SEP_ID, AdapterSet, init_teacher_adapters, stack_adapters
from .rng import Rng, derive_seed
from .tasks import (
    TOKENIZER, PretrainSplit, Task, TaskSuite, corpus_window, encode_target, render_instruction,
    split_abc, teacher_input,
)
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda1: float = 5.0
    lambda2_mode: str = "sigmoid_of_ins"
    lambda2_const: float = 0.5
    lr: float = 1e-4
    pretrain_lr: float = 1e-3
    teacher_lr: float = 1e-2
    warmup_ratio: float = 0.02
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    pretrain_steps: int = 5000
    teacher_steps: int = 2000
    finetune_steps: int = 10000
    batch_size: int = 8
    tasks_per_batch: int = 2
    window_len: int = 36
    min_seg: int = 4
    seed: int = 0
    use_pred: bool = True
    use_kl: bool = True
    use_ins: bool = True
    pretrain_enabled: bool = True
    fusion_enabled: bool = True
    log_every: int = 10
    record_wall_time: bool = False

    def __post_init__(self):
        if self.lambda1 < 0:
            raise ConfigError("train.lambda1 must be >= 0")
        if self.lambda2_mode not in ("sigmoid_of_ins", "constant"):
            raise ConfigError("train.lambda2_mode must be 'sigmoid_of_ins' or 'constant'")
        if self.batch_size < 1 or self.tasks_per_batch < 1:
            raise ConfigError("train.batch_size and train.tasks_per_batch must be >= 1")
        if self.batch_size % self.tasks_per_batch:
            raise ConfigError("train.batch_size must be a multiple of train.tasks_per_batch")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError("train.warmup_ratio must lie in [0, 1)")


@dataclass
class LossBreakdown:
    l_pred: float
    l_kl: float
    l_ins: float
    lambda2: float
    l_total: float


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


# ---------------------------------------------------------------- optimisation

def lr_at(step: int, total: int, base: float, warmup_ratio: float) -> float:
    """Linear warmup over ``warmup_ratio * total`` steps, then linear decay to zero."""
    warm = max(1, int(round(warmup_ratio * total)))
    if step < warm:
        return base * (step + 1) / warm
    return base * max(0.0, (total - step) / max(1, total - warm))


class AdamW:
    def __init__(self, params: list[tuple[str, Tensor]], weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8, grad_clip: float | None = 1.0):
        self.params = params
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = grad_clip
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params}
        self.v = {n: np.zeros_like(p.data) for n, p in params}
        self._scratch: dict[str, np.ndarray] = {}

    def _buf(self, name: str, p: Tensor) -> np.ndarray:
        buf = self._scratch.get(name)
        if buf is None or buf.shape != p.data.shape:
            buf = self._scratch[name] = np.empty_like(p.data)
        return buf

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> float:
        """One update; returns the pre-clipping global gradient norm."""
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for _, p in self.params]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        if not math.isfinite(norm):
            raise TrainingFailure("non-finite gradient norm")
        factor = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for (n, p), g in zip(self.params, grads):
            if factor != 1.0:
                g = g * factor
            m, v, buf = self.m[n], self.v[n], self._buf(n, p)
            m *= self.b1
            np.multiply(g, 1.0 - self.b1, out=buf)
            m += buf
            v *= self.b2
            np.multiply(g, g, out=buf)
            buf *= 1.0 - self.b2
            v += buf
            # x -= lr * ((m / c1) / (sqrt(v / c2) + eps) + wd * x), without temporaries
            np.divide(v, c2, out=buf)
            np.sqrt(buf, out=buf)
            buf += self.eps
            np.divide(m / c1, buf, out=buf)
            if self.wd:
                buf += self.wd * p.data
            buf *= lr
            p.data = p.data - buf
            p.grad = None
        return norm

    def state_dict(self, prefix: str = "opt") -> dict[str, np.ndarray]:
        out = {}
        for n, _ in self.params:
            out[f"{prefix}/m/{n}"] = self.m[n]
            out[f"{prefix}/v/{n}"] = self.v[n]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], t: int, prefix: str = "opt") -> None:
        for n, _ in self.params:
            self.m[n] = state[f"{prefix}/m/{n}"].copy()
            self.v[n] = state[f"{prefix}/v/{n}"].copy()
        self.t = t


# ---------------------------------------------------------------- metrics

COLUMNS = ["step", "stage", "task_id", "l_pred", "l_kl", "l_ins", "lambda2", "l_total",
           "grad_norm", "lr", "wall_ms", "config_hash"]


class MetricsLog:
    """Append-only CSV. ``wall_ms`` stays empty unless wall time is requested,
    so that identical runs give identical files."""

    def __init__(self, path: str | None, config_hash: str = "", record_wall_time: bool = False):
        self.path = path
        self.config_hash = config_hash
        self.record_wall_time = record_wall_time
        self.rows: list[dict] = []
        self._t0 = time.perf_counter()
        if path and not os.path.exists(path):
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(COLUMNS)

    def log(self, step: int, stage: str, task_id: str, loss: LossBreakdown, grad_norm: float,
            lr: float) -> None:
        wall = f"{(time.perf_counter() - self._t0) * 1000:.0f}" if self.record_wall_time else ""
        row = {"step": step, "stage": stage, "task_id": task_id, "l_pred": repr(loss.l_pred),
               "l_kl": repr(loss.l_kl), "l_ins": repr(loss.l_ins), "lambda2": repr(loss.lambda2),
               "l_total": repr(loss.l_total), "grad_norm": repr(grad_norm), "lr": repr(lr),
               "wall_ms": wall, "config_hash": self.config_hash}
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[c] for c in COLUMNS])


# ---------------------------------------------------------------- batching

def pad_batch(seqs: list[list[int]], pad_id: int = PAD_ID) -> np.ndarray:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def decoder_arrays(targets: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Teacher forcing: input is BOS + target[:-1], prediction target is target."""
    dec_in = pad_batch([[BOS_ID] + t[:-1] for t in targets])
    tgt = pad_batch(targets)
    return dec_in, tgt


@dataclass
class EncodedTask:
    """Token ids for a task's training instances under one instruction mode."""

    task: Task
    instruction: list[int]
    sources: list[list[int]]
    targets: list[list[int]]
    teacher_inputs: list[list[int]]

    @classmethod
    def build(cls, task: Task, mode: str, n: int | None = None) -> "EncodedTask":
        instr = render_instruction(task, mode)
        insts = task.instances(n)
        return cls(task, TOKENIZER.encode(instr),
                   [TOKENIZER.encode(i.source) for i in insts],
                   [encode_target(i.target) for i in insts],
                   [teacher_input(instr, i.source) for i in insts])


# ---------------------------------------------------------------- teacher LoRA tuning

@dataclass
class TeacherResult:
    adapters: AdapterSet
    final_loss: float
    steps: int


class DivergenceGuard:
    """Raises once the loss stays above ``factor`` x its first value for ``patience`` steps."""

    def __init__(self, label: str, factor: float = 10.0, patience: int = 100):
        self.label, self.factor, self.patience = label, factor, patience
        self.first: float | None = None
        self.bad = 0

    def update(self, step: int, loss: float) -> None:
        if self.first is None:
            self.first = loss
        self.bad = self.bad + 1 if loss > self.factor * self.first else 0
        if self.bad >= self.patience:
            raise TrainingFailure(f"{self.label} diverged at step {step} "
                                  f"(loss {loss:.3g} vs initial {self.first:.3g})")


def teacher_batch(enc: EncodedTask, idx: list[int]):
    src = pad_batch([enc.teacher_inputs[i] for i in idx])
    dec_in, tgt = decoder_arrays([enc.targets[i] for i in idx])
    return src, dec_in, tgt


def train_teacher(model: Tagi, enc: EncodedTask, cfg: TrainConfig, steps: int | None = None,
                  metrics: MetricsLog | None = None) -> TeacherResult:
    """Fit one task's LoRA on the frozen backbone; input is (instruction ; source)."""
    steps = cfg.teacher_steps if steps is None else steps
    task_id = enc.task.id
    model.backbone.set_trainable(False)
    adapters = init_teacher_adapters(model.cfg, Rng(derive_seed(cfg.seed, "teacher-init", task_id)),
                                     task_id)
    named = [(f"{k[0]}/{k[1]}/{k[2]}/{ab}", t) for k, m in adapters.ordered()
             for ab, t in (("A", m.A), ("B", m.B))]
    opt = AdamW(named, cfg.weight_decay, grad_clip=cfg.grad_clip)
    n = len(enc.targets)
    guard = DivergenceGuard(f"teacher {task_id}")
    loss_val = float("nan")
    for step in range(steps):
        rng = Rng(derive_seed(cfg.seed, "teacher", task_id, step))
        idx = [rng.randint(0, n - 1) for _ in range(cfg.batch_size)]
        src, dec_in, tgt = teacher_batch(enc, idx)
        T.reset_tape()
        loss = T.cross_entropy(model.teacher_logits(src, dec_in, adapters), tgt, PAD_ID)
        T.backward(loss)
        lr = lr_at(step, steps, cfg.teacher_lr, cfg.warmup_ratio)
        gnorm = opt.step(lr)
        loss_val = loss.item()
        guard.update(step, loss_val)
        if metrics and (step % cfg.log_every == 0 or step == steps - 1):
            metrics.log(step, "teacher", task_id,
                        LossBreakdown(loss_val, 0.0, 0.0, 0.0, loss_val), gnorm, lr)
    for t in adapters.parameters():
        t.requires_grad = False
    return TeacherResult(adapters, loss_val, steps)


def teacher_token_accuracy(model: Tagi, enc: EncodedTask, adapters: AdapterSet | None,
                           idx: list[int], chunk: int = 50) -> float:
    """Teacher-forced argmax accuracy over non-pad target tokens."""
    hit = tot = 0
    with T.no_grad():
        for s in range(0, len(idx), chunk):
            src, dec_in, tgt = teacher_batch(enc, idx[s:s + chunk])
            pred = model.teacher_logits(src, dec_in, adapters).data.argmax(-1)
            live = tgt != PAD_ID
            hit += int(((pred == tgt) & live).sum())
            tot += int(live.sum())
    return hit / tot


# ---------------------------------------------------------------- pretraining

def pretrain_batch(splits: list[PretrainSplit]):
    a = pad_batch([s.a for s in splits])
    b = pad_batch([s.b for s in splits])
    dec_in, tgt = decoder_arrays([s.c for s in splits])
    return a, b, dec_in, tgt


def sample_splits(cfg: TrainConfig, corpus_seed: int, step: int) -> list[PretrainSplit]:
    rng = Rng(derive_seed(cfg.seed, corpus_seed, "pretrain", step))
    return [split_abc(corpus_window(rng, cfg.window_len, cfg.min_seg), rng, cfg.min_seg)
            for _ in range(cfg.batch_size)]


def pretrain_loss(model: Tagi, splits: list[PretrainSplit]) -> Tensor:
    """NLL of segment c given b, with a routed through the hypernetwork."""
    a, b, dec_in, tgt = pretrain_batch(splits)
    out = model.student_forward(a, b, dec_in)
    return T.cross_entropy(out.logits, tgt, PAD_ID)


def pretrain_step(model: Tagi, opt: AdamW, splits: list[PretrainSplit], lr: float) -> tuple[LossBreakdown, float]:
    T.reset_tape()
    loss = pretrain_loss(model, splits)
    T.backward(loss)
    gnorm = opt.step(lr)
    v = loss.item()
    return LossBreakdown(v, 0.0, 0.0, 0.0, v), gnorm


def pretrain_params(model: Tagi) -> list[tuple[str, Tensor]]:
    model.backbone.set_trainable(True)
    for p in model.hyper.parameters():
        p.requires_grad = True
    hp = {id(p) for p in model.hyper_parameters()}
    return [(n, p) for n, p in model.named_parameters()
            if n.startswith("backbone/") or id(p) in hp]


# ---------------------------------------------------------------- finetuning

@dataclass
class FinetuneBatch:
    task_ids: list[str]
    instr: np.ndarray
    index: np.ndarray
    src: np.ndarray
    dec_in: np.ndarray
    tgt: np.ndarray
    instance_ids: list[tuple[str, int]]


def finetune_batch(encoded: dict[str, EncodedTask], cfg: TrainConfig, step: int) -> FinetuneBatch:
    """``tasks_per_batch`` distinct tasks, batch_size / tasks_per_batch instances each."""
    rng = Rng(derive_seed(cfg.seed, "finetune", step))
    ids = list(encoded)
    rng.shuffle(ids)
    chosen = ids[:min(cfg.tasks_per_batch, len(ids))]
    per = cfg.batch_size // len(chosen)
    index, srcs, tgts, inst = [], [], [], []
    for u, tid in enumerate(chosen):
        e = encoded[tid]
        for _ in range(per):
            i = rng.randint(0, len(e.targets) - 1)
            index.append(u)
            srcs.append(e.sources[i])
            tgts.append(e.targets[i])
            inst.append((tid, i))
    dec_in, tgt = decoder_arrays(tgts)
    return FinetuneBatch(chosen, pad_batch([encoded[t].instruction for t in chosen]),
                         np.asarray(index), pad_batch(srcs), dec_in, tgt, inst)


class TeacherCache:
    """Frozen teacher logits per training instance, computed in fixed chunks.

    Backbone and teachers are both frozen during finetuning, so these are
    constants; fixed chunking keeps them bit-reproducible across resumes.
    """

    def __init__(self, model: Tagi, encoded: dict[str, EncodedTask],
                 teachers: dict[str, AdapterSet], chunk: int = 50):
        self.logits: dict[tuple[str, int], np.ndarray] = {}
        with T.no_grad():
            for tid, enc in encoded.items():
                ad = teachers[tid]
                n = len(enc.targets)
                for s in range(0, n, chunk):
                    idx = list(range(s, min(n, s + chunk)))
                    src, dec_in, tgt = teacher_batch(enc, idx)
                    out = model.teacher_logits(src, dec_in, ad).data
                    for j, i in enumerate(idx):
                        self.logits[(tid, i)] = out[j, :len(enc.targets[i])].copy()

    def batch(self, b: FinetuneBatch, vocab: int) -> np.ndarray:
        out = np.zeros(b.tgt.shape + (vocab,))
        for j, key in enumerate(b.instance_ids):
            lg = self.logits[key]
            out[j, :lg.shape[0]] = lg
        return out


def lambda2_value(cfg: TrainConfig, l_ins: float) -> float:
    """Weight of the parameter-alignment term; a plain number, never differentiated."""
    return sigmoid(l_ins) if cfg.lambda2_mode == "sigmoid_of_ins" else cfg.lambda2_const


def finetune_loss(model: Tagi, batch: FinetuneBatch, cfg: TrainConfig,
                  teachers: dict[str, AdapterSet] | None,
                  teacher_logits: np.ndarray | None = None) -> tuple[Tensor, LossBreakdown]:
    """L_pred + lambda1 * L_kl + lambda2 * L_ins over the enabled terms."""
    if not (cfg.use_pred or cfg.use_kl or cfg.use_ins):
        raise ConfigError("all finetuning loss terms are disabled")
    if cfg.use_kl or cfg.use_ins:
        missing = [t for t in batch.task_ids if not teachers or t not in teachers]
        if missing:
            raise ConfigError(f"no teacher adapters for task(s) {missing} but L_kl/L_ins is enabled")
    out = model.student_forward(batch.instr, batch.src, batch.dec_in, index=batch.index)
    mask = batch.tgt != PAD_ID
    terms: list[Tensor] = []
    l_pred = l_kl = l_ins = lam2 = 0.0
    if cfg.use_pred:
        t = T.cross_entropy(out.logits, batch.tgt, PAD_ID)
        l_pred = t.item()
        terms.append(t)
    if cfg.use_kl:
        if teacher_logits is None:
            tl = stack_adapters([teachers[batch.task_ids[u]] for u in batch.index])
            full = pad_batch([_teacher_row(batch, j) for j in range(len(batch.index))])
            with T.no_grad():
                teacher_logits = model.teacher_logits(full, batch.dec_in, tl).data
        t = T.kl_divergence(Tensor(teacher_logits), out.logits, mask)
        l_kl = t.item()
        terms.append(T.scale(t, cfg.lambda1))
    if cfg.use_ins:
        gen_flat = T.take(out.adapters.flatten(), batch.index)
        ref = np.stack([teachers[batch.task_ids[u]].flatten().data for u in batch.index])
        t = T.mse(gen_flat, ref)
        l_ins = t.item()
        lam2 = lambda2_value(cfg, l_ins)
        terms.append(T.scale(t, lam2))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, LossBreakdown(l_pred, l_kl, l_ins, lam2, total.item())


def _teacher_row(batch: FinetuneBatch, j: int) -> list[int]:
    instr = [int(x) for x in batch.instr[batch.index[j]] if x != PAD_ID]
    src = [int(x) for x in batch.src[j] if x != PAD_ID]
    return instr + [SEP_ID] + src


def finetune_params(model: Tagi) -> list[tuple[str, Tensor]]:
    """Backbone frozen; only the hypernetwork pieces on the student path train."""
    model.backbone.set_trainable(False)
    for p in model.hyper.parameters():
        p.requires_grad = False
    hp = {id(p) for p in model.hyper_parameters()}
    out = []
    for n, p in model.named_parameters():
        if id(p) in hp:
            p.requires_grad = True
            out.append((n, p))
    return out


def finetune_step(model: Tagi, opt: AdamW, batch: FinetuneBatch, cfg: TrainConfig,
                  teachers: dict[str, AdapterSet] | None, lr: float,
                  teacher_logits: np.ndarray | None = None) -> tuple[LossBreakdown, float]:
    T.reset_tape()
    total, br = finetune_loss(model, batch, cfg, teachers, teacher_logits)
    T.backward(total)
    return br, opt.step(lr)


def mixed_task_label(task_ids: list[str]) -> str:
    return "+".join(task_ids)


def encode_suite_tasks(suite: TaskSuite, mode: str) -> dict[str, EncodedTask]:
    return {t.id: EncodedTask.build(t, mode) for t in suite.meta_train}
