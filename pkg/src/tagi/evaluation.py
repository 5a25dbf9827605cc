"""Metrics, per-task evaluation and inference-cost accounting."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, LengthError
from .hypernet import Tagi
from .model import EOS_ID, ModelConfig, lora_param_count, zero_adapters
from .tasks import TOKENIZER, Task, render_instruction
from .tensor import FLOPS


# ---------------------------------------------------------------- text metrics

def lcs_length(a: list, b: list) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(reference: str, hypothesis: str) -> float:
    """LCS F1 over whitespace tokens, no stemming."""
    ref, hyp = reference.split(), hypothesis.split()
    lcs = lcs_length(ref, hyp)
    if lcs == 0:
        return 0.0
    p = lcs / len(hyp)
    r = lcs / len(ref)
    return 2 * p * r / (p + r)


def exact_match(reference: str, hypothesis: str) -> int:
    return int(reference.rstrip() == hypothesis.rstrip())


# ---------------------------------------------------------------- analytical cost

@dataclass(frozen=True)
class FlopsQuery:
    """N parameters, n instances, instruction length t, input length i."""

    N: int
    n: int
    t: int
    i: int

    def __post_init__(self):
        for k in ("N", "n", "t", "i"):
            v = getattr(self, k)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ValueError(f"{k} must be a non-negative integer, got {v!r}")
        if self.N < 1 or self.n < 1:
            raise ValueError("N and n must be >= 1")


def flops_standard(q: FlopsQuery) -> int:
    """Instruction re-read with every instance: N * n * (t + i)."""
    return q.N * q.n * (q.t + q.i)


def flops_tagi(q: FlopsQuery) -> int:
    """Instruction read once: N * (t + n * i)."""
    return q.N * (q.t + q.n * q.i)


# ---------------------------------------------------------------- parameter accounting

def backbone_param_count(cfg: ModelConfig) -> int:
    d, f, V, L = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_len
    attn = 4 * d * d
    ln = 2 * d
    ff = d * f + f + f * d + d
    enc_layer = attn + ff + 2 * ln
    dec_layer = 2 * attn + ff + 3 * ln
    return V * d + 2 * L * d + cfg.n_enc_layers * enc_layer + cfg.n_dec_layers * dec_layer + 2 * ln


def param_ratio(cfg: ModelConfig, rank: int | None = None) -> float:
    """Generated LoRA parameters per task over backbone parameters."""
    return lora_param_count(cfg, rank) / backbone_param_count(cfg)


# ---------------------------------------------------------------- task evaluation

@dataclass
class TaskReport:
    task_id: str
    split: str
    rouge_l: float
    exact_match: float
    n_instances: int
    instruction_encodings_performed: int
    adapter_generations_performed: int
    counted_flops: dict[str, int]
    analytical: dict[str, int] = field(default_factory=dict)
    samples: list[dict] = field(default_factory=list)


def evaluate_task(model: Tagi, task: Task, mode: str = "def", n: int | None = None,
                  adapters: str = "generated", max_new: int = 20,
                  instances=None, keep_samples: int = 5) -> TaskReport:
    """Encode the instruction and generate adapters once, then decode every instance."""
    if adapters not in ("generated", "zero"):
        raise ContractError(f"unknown adapter mode {adapters!r}")
    instances = task.instances(n) if instances is None else instances
    instr = TOKENIZER.encode(render_instruction(task, mode))
    limit = model.cfg.max_len
    if len(instr) > limit:
        raise LengthError(f"{task.id}: instruction has {len(instr)} tokens > max_len {limit}")
    srcs = [TOKENIZER.encode(x.source) for x in instances]
    bad = [j for j, s in enumerate(srcs) if len(s) > limit]
    if bad:
        raise LengthError(f"{task.id}: instances {bad} exceed max_len {limit}")

    before = dict(FLOPS.buckets)
    counts0 = dict(model.counts)
    rouge, em, samples = [], [], []
    with T.no_grad():
        enc = model.encode_instruction(np.asarray([instr]))
        if adapters == "generated":
            gen = model.generate_adapters(enc)
        else:
            gen = zero_adapters(model.cfg, 1)
        with FLOPS.phase("per_instance"):
            for inst, src in zip(instances, srcs):
                out = model.generate(enc, gen, np.asarray([src]), max_new)
                if out and out[-1] == EOS_ID:
                    out = out[:-1]
                hyp = TOKENIZER.decode(out)
                rouge.append(rouge_l(inst.target, hyp))
                em.append(exact_match(inst.target, hyp))
                if len(samples) < keep_samples:
                    samples.append({"source": inst.source, "target": inst.target, "output": hyp})
    counted = {k: FLOPS.buckets.get(k, 0) - before.get(k, 0) for k in FLOPS.buckets}
    counted = {k: v for k, v in counted.items() if v}
    q = FlopsQuery(backbone_param_count(model.cfg), len(instances), len(instr),
                   int(round(float(np.mean([len(s) for s in srcs])))))
    return TaskReport(
        task_id=task.id, split=task.split,
        rouge_l=float(np.mean(rouge)), exact_match=float(np.mean(em)),
        n_instances=len(instances),
        instruction_encodings_performed=model.counts["instruction_encode"] - counts0["instruction_encode"],
        adapter_generations_performed=model.counts["adapter_generate"] - counts0["adapter_generate"],
        counted_flops=counted,
        analytical={"standard": flops_standard(q), "tagi": flops_tagi(q)},
        samples=samples,
    )


def evaluate_tasks(model: Tagi, tasks: list[Task], mode: str = "def", n: int | None = None,
                   adapters: str = "generated", max_new: int = 20,
                   config_hash: str = "") -> dict:
    """Report dict: per-task rows in task-id order plus aggregates and FLOP summaries."""
    rows = [evaluate_task(model, t, mode, n, adapters, max_new)
            for t in sorted(tasks, key=lambda t: t.id)]
    buckets: dict[str, int] = {}
    for r in rows:
        for k, v in r.counted_flops.items():
            buckets[k] = buckets.get(k, 0) + v
    return {
        "config_hash": config_hash,
        "mode": mode,
        "adapters": adapters,
        "per_task": [asdict(r) for r in rows],
        "aggregate": {
            "rouge_l": float(np.mean([r.rouge_l for r in rows])),
            "exact_match": float(np.mean([r.exact_match for r in rows])),
            "n_tasks": len(rows),
        },
        "flops": {
            "analytical_standard": sum(r.analytical["standard"] for r in rows),
            "analytical_tagi": sum(r.analytical["tagi"] for r in rows),
            "counted_buckets": buckets,
        },
        "param_ratio": param_ratio(model.cfg),
    }
