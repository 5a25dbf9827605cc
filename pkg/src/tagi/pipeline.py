"""Stage runners: pretrain -> teachers -> finetune, one checkpoint per stage."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import ConfigError, FormatError
from .hypernet import Tagi
from .model import AdapterSet
from .rng import Rng, derive_seed
from .tasks import build_suite
from .training import (
    AdamW, MetricsLog, TeacherCache, encode_suite_tasks, finetune_batch, finetune_params,
    finetune_step, lr_at, mixed_task_label, pretrain_params, pretrain_step, sample_splits,
    train_teacher,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunPaths:
    root: str

    @property
    def pretrain(self) -> str:
        return os.path.join(self.root, "pretrain.ckpt")

    @property
    def teachers(self) -> str:
        return os.path.join(self.root, "teachers")

    def teacher(self, task_id: str) -> str:
        return os.path.join(self.teachers, f"{task_id}.ckpt")

    @property
    def finetune(self) -> str:
        return os.path.join(self.root, "tagi.ckpt")

    @property
    def metrics(self) -> str:
        return os.path.join(self.root, "metrics.csv")

    def report(self, split: str, tag: str = "") -> str:
        return os.path.join(self.root, f"report_{split}{tag}.json")


def paths_for(cfg: RunConfig) -> RunPaths:
    return RunPaths(cfg.paths.out_dir)


def build_suite_for(cfg: RunConfig):
    s = cfg.suite
    return build_suite(s.seed, s.n_train_tasks, s.n_train_instances, s.n_eval_instances)


def build_model(cfg: RunConfig) -> Tagi:
    return Tagi(cfg.model, Rng(derive_seed(cfg.train.seed, "init")), cfg.train.fusion_enabled)


def _meta(cfg: RunConfig, stage: str, **extra) -> dict:
    return {"stage": stage, "config_hash": cfg.config_hash, "model_hash": cfg.model_hash,
            "seed": cfg.train.seed, **extra}


def _load(path: str, cfg: RunConfig, stage: str, allow_mismatch: bool = False):
    if not os.path.exists(path):
        raise ConfigError(f"required {stage} artifact {path} does not exist")
    tensors, meta = load_checkpoint(path)
    if meta.get("stage") != stage:
        raise FormatError(f"{path}: expected a {stage} checkpoint, found {meta.get('stage')!r}")
    if meta.get("model_hash") != cfg.model_hash and not allow_mismatch:
        raise ConfigError(f"{path}: model config hash {meta.get('model_hash')} does not match "
                          f"{cfg.model_hash} (use --allow-mismatch to override)")
    return tensors, meta


def _metrics(cfg: RunConfig) -> MetricsLog:
    return MetricsLog(paths_for(cfg).metrics, cfg.config_hash, cfg.train.record_wall_time)


# ---------------------------------------------------------------- pretraining

def run_pretrain(cfg: RunConfig) -> str:
    """Train backbone and hypernetwork on corpus splits; writes pretrain.ckpt."""
    tc = cfg.train
    model = build_model(cfg)
    opt = AdamW(pretrain_params(model), tc.weight_decay, grad_clip=tc.grad_clip)
    metrics = _metrics(cfg)
    for step in range(tc.pretrain_steps):
        lr = lr_at(step, tc.pretrain_steps, tc.pretrain_lr, tc.warmup_ratio)
        br, gnorm = pretrain_step(model, opt, sample_splits(tc, cfg.paths.corpus_seed, step), lr)
        if step % tc.log_every == 0 or step == tc.pretrain_steps - 1:
            metrics.log(step, "pretrain", "corpus", br, gnorm, lr)
        if step % 500 == 0:
            log.info("pretrain step %d loss %.4f", step, br.l_pred)
    path = paths_for(cfg).pretrain
    save_checkpoint(path, model.state_dict(), _meta(cfg, "pretrain", steps=tc.pretrain_steps))
    log.info("wrote %s", path)
    return path


def load_base(cfg: RunConfig) -> Tagi:
    """Pretrained weights when pretraining is on, otherwise the seeded initialization."""
    model = build_model(cfg)
    if cfg.train.pretrain_enabled:
        tensors, _ = _load(paths_for(cfg).pretrain, cfg, "pretrain")
        model.load_state_dict(tensors)
    return model


# ---------------------------------------------------------------- teachers

def run_teachers(cfg: RunConfig, force: bool = False) -> list[str]:
    """One LoRA teacher per meta-train task; existing files are kept unless ``force``."""
    model = load_base(cfg)
    suite = build_suite_for(cfg)
    encoded = encode_suite_tasks(suite, cfg.suite.mode)
    rp = paths_for(cfg)
    metrics = _metrics(cfg)
    out = []
    for tid, enc in encoded.items():
        path = rp.teacher(tid)
        out.append(path)
        if os.path.exists(path) and not force:
            log.info("teacher %s exists, skipping (use --force to retrain)", tid)
            continue
        res = train_teacher(model, enc, cfg.train, metrics=metrics)
        save_checkpoint(path, res.adapters.state_dict("teacher"),
                        _meta(cfg, "teacher", task_id=tid, steps=res.steps,
                              final_loss=res.final_loss))
        log.info("teacher %s final loss %.4f", tid, res.final_loss)
    return out


def load_teachers(cfg: RunConfig, task_ids) -> dict[str, AdapterSet]:
    out = {}
    for tid in task_ids:
        tensors, meta = _load(paths_for(cfg).teacher(tid), cfg, "teacher")
        if meta.get("task_id") != tid:
            raise FormatError(f"teacher checkpoint for {tid} is labelled {meta.get('task_id')!r}")
        out[tid] = AdapterSet.from_state_dict(tensors, "teacher", cfg.model, tid)
    return out


# ---------------------------------------------------------------- finetuning

def run_finetune(cfg: RunConfig, resume: bool = False, stop_after: int | None = None) -> str:
    """Distillation finetuning of the hypernetwork; writes tagi.ckpt.

    ``stop_after`` ends the run early (checkpoint records the step reached);
    ``resume`` continues from that checkpoint with identical results.
    """
    tc = cfg.train
    rp = paths_for(cfg)
    model = load_base(cfg)
    suite = build_suite_for(cfg)
    encoded = encode_suite_tasks(suite, cfg.suite.mode)
    teachers = load_teachers(cfg, encoded) if (tc.use_kl or tc.use_ins) else None
    params = finetune_params(model)
    opt = AdamW(params, tc.weight_decay, grad_clip=tc.grad_clip)
    start = 0
    if resume:
        tensors, meta = _load(rp.finetune, cfg, "finetune")
        if meta.get("config_hash") != cfg.config_hash:
            raise ConfigError("cannot resume: checkpoint was written under a different config")
        model.load_state_dict(tensors)
        opt.load_state_dict(tensors, int(meta["opt_t"]))
        start = int(meta["step"])
    cache = TeacherCache(model, encoded, teachers) if tc.use_kl else None
    metrics = _metrics(cfg)
    end = tc.finetune_steps if stop_after is None else min(stop_after, tc.finetune_steps)
    for step in range(start, end):
        batch = finetune_batch(encoded, tc, step)
        lr = lr_at(step, tc.finetune_steps, tc.lr, tc.warmup_ratio)
        tl = cache.batch(batch, cfg.model.vocab_size) if cache else None
        br, gnorm = finetune_step(model, opt, batch, tc, teachers, lr, tl)
        if step % tc.log_every == 0 or step == tc.finetune_steps - 1:
            metrics.log(step, "finetune", mixed_task_label(batch.task_ids), br, gnorm, lr)
        if step % 500 == 0:
            log.info("finetune step %d loss %.4f", step, br.l_total)
    state = dict(model.state_dict())
    state.update(opt.state_dict())
    save_checkpoint(rp.finetune, state,
                    _meta(cfg, "finetune", step=max(end, start), total=tc.finetune_steps,
                          opt_t=opt.t, complete=max(end, start) >= tc.finetune_steps))
    log.info("wrote %s at step %d", rp.finetune, max(end, start))
    return rp.finetune


def load_tagi(cfg: RunConfig, path: str | None = None, allow_mismatch: bool = False) -> Tagi:
    """Model weights from a finetune (or pretrain) checkpoint; optimizer state is ignored."""
    path = path or paths_for(cfg).finetune
    tensors, meta = load_checkpoint(path) if os.path.exists(path) else (None, None)
    if tensors is None:
        raise ConfigError(f"checkpoint {path} does not exist")
    stage = meta.get("stage")
    if stage not in ("finetune", "pretrain"):
        raise FormatError(f"{path}: cannot evaluate a {stage!r} checkpoint")
    if meta.get("model_hash") != cfg.model_hash and not allow_mismatch:
        raise ConfigError(f"{path}: model config hash mismatch (use --allow-mismatch to override)")
    model = build_model(cfg)
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path}: {e}") from None
    return model


def run_pipeline(cfg: RunConfig, force_teachers: bool = False) -> dict[str, str]:
    out = {}
    if cfg.train.pretrain_enabled:
        out["pretrain"] = run_pretrain(cfg)
    if cfg.train.use_kl or cfg.train.use_ins:
        out["teachers"] = paths_for(cfg).teachers
        run_teachers(cfg, force=force_teachers)
    out["finetune"] = run_finetune(cfg)
    return out


def state_digest(arrays: dict[str, np.ndarray]) -> str:
    """Order-independent hash of named arrays, for frozenness checks."""
    import hashlib
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())
    return h.hexdigest()
