"""Seeded end-to-end runs and ablation rows, cached on disk by content key.

A summary is keyed by the run configs plus a digest of the package sources,
so editing any module invalidates earlier results instead of reusing them.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import time

from .config import RunConfig
from .evaluation import evaluate_tasks
from .pipeline import (
    build_suite_for, load_tagi, paths_for, run_finetune, run_pretrain, run_teachers,
)

log = logging.getLogger(__name__)

SEEDS = (0, 1, 2)
E2E_TEACHER_STEPS = 300
ABLATION_FINETUNE_STEPS = 2000
ABLATIONS = {
    "full": {},
    "w/o pretraining": {"pretrain_enabled": False},
    "w/o fusion": {"fusion_enabled": False},
    "w/o L_kl": {"use_kl": False},
    "w/o L_ins": {"use_ins": False},
}


def source_digest() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha256()
    for name in sorted(os.listdir(here)):
        if name.endswith(".py"):
            h.update(name.encode())
            with open(os.path.join(here, name), "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()[:16]


def e2e_config(seed: int, root: str) -> RunConfig:
    cfg = RunConfig()
    cfg.train.seed = seed
    cfg.train.teacher_steps = E2E_TEACHER_STEPS
    cfg.train.log_every = 50
    cfg.paths.out_dir = os.path.join(root, f"seed{seed}")
    return cfg


def ablation_config(name: str, root: str) -> RunConfig:
    cfg = e2e_config(0, root)
    for k, v in ABLATIONS[name].items():
        setattr(cfg.train, k, v)
    cfg.train.finetune_steps = ABLATION_FINETUNE_STEPS
    slug = name.replace("/", "").replace(" ", "_")
    cfg.paths.out_dir = os.path.join(root, "ablations", slug)
    return cfg


def _evaluate(cfg: RunConfig, adapters: str) -> dict:
    model = load_tagi(cfg)
    report = evaluate_tasks(model, build_suite_for(cfg).split("test"), cfg.suite.mode,
                            None, adapters, 20, cfg.config_hash)
    path = paths_for(cfg).report("test", "" if adapters == "generated" else "_zero")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report["aggregate"]


def run_seed(cfg: RunConfig) -> dict:
    """pretrain -> teachers -> finetune -> evaluate (generated and zero adapters)."""
    t = {}
    t0 = time.perf_counter()
    run_pretrain(cfg)
    t["pretrain"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    run_teachers(cfg, force=True)
    t["teachers"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    run_finetune(cfg)
    t["finetune"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    gen = _evaluate(cfg, "generated")
    zero = _evaluate(cfg, "zero")
    t["evaluate"] = time.perf_counter() - t0
    return {"seed": cfg.train.seed, "config_hash": cfg.config_hash, "generated": gen,
            "zero": zero, "seconds": t}


def run_ablation(name: str, cfg: RunConfig, seed0: RunConfig) -> dict:
    """Reuses the seed-0 pretrain checkpoint and teachers wherever the row allows."""
    t0 = time.perf_counter()
    rp, sp = paths_for(cfg), paths_for(seed0)
    os.makedirs(rp.root, exist_ok=True)
    if cfg.train.pretrain_enabled:
        shutil.copyfile(sp.pretrain, rp.pretrain)
        shutil.copytree(sp.teachers, rp.teachers, dirs_exist_ok=True)
    else:
        run_teachers(cfg, force=True)
    run_finetune(cfg)
    return {"row": name, "config_hash": cfg.config_hash,
            "generated": _evaluate(cfg, "generated"), "zero": _evaluate(cfg, "zero"),
            "seconds": time.perf_counter() - t0}


def cache_key(root: str) -> str:
    hashes = [e2e_config(s, root).config_hash for s in SEEDS]
    hashes += [ablation_config(n, root).config_hash for n in ABLATIONS]
    blob = json.dumps({"configs": hashes, "src": source_digest()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def summary_path(root: str) -> str:
    return os.path.join(root, f"summary_{cache_key(root)}.json")


def load_summary(root: str) -> dict | None:
    path = summary_path(root)
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def run_all(root: str, with_ablations: bool = True) -> dict:
    """All seeds, then (optionally) the ablation rows; writes and returns the summary."""
    key = cache_key(root)
    seeds = []
    t0 = time.perf_counter()
    for s in SEEDS:
        res = run_seed(e2e_config(s, root))
        log.info("seed %d: generated EM %.3f, zero EM %.3f", s, res["generated"]["exact_match"],
                 res["zero"]["exact_match"])
        seeds.append(res)
    main_seconds = time.perf_counter() - t0
    rows = []
    if with_ablations:
        seed0 = e2e_config(0, root)
        for name in ABLATIONS:
            rows.append(run_ablation(name, ablation_config(name, root), seed0))
    summary = {"key": key, "source_digest": source_digest(), "seeds": seeds,
               "main_seconds": main_seconds, "ablations": rows,
               "teacher_steps": E2E_TEACHER_STEPS,
               "ablation_finetune_steps": ABLATION_FINETUNE_STEPS,
               "defaults": dataclasses.asdict(copy.deepcopy(RunConfig()))}
    os.makedirs(root, exist_ok=True)
    with open(summary_path(root), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
