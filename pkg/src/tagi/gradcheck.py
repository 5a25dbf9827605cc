"""Finite-difference sweep over every differentiable op and the full finetune objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .hypernet import Tagi
from .model import BOS_ID, PAD_ID, ModelConfig, init_teacher_adapters
from .rng import Rng, derive_seed
from .tensor import GradCheckReport, Tensor, finite_diff_check
from .training import FinetuneBatch, TrainConfig, finetune_loss

TINY = ModelConfig(d_model=16, n_enc_layers=1, n_dec_layers=1, n_heads=2, d_ff=32,
                   max_len=32, lora_rank=2, gen_hidden=16, id_dim=8)


@dataclass
class OpCheck:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _randn(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    """Random linear functional so every output coordinate reaches the loss."""
    return T.tsum(T.mul(out, Tensor(w)))


def op_cases(seed: int = 0) -> list[tuple[str, Callable, list[Tensor]]]:
    g = np.random.default_rng(seed)

    def w(*shape):
        return g.standard_normal(shape)

    cases = []
    a, b = _randn(g, 3, 4), _randn(g, 3, 4)
    wa = w(3, 4)
    cases.append(("add", lambda x: _weighted(T.add(x[0], x[1]), wa), [a, b]))
    cases.append(("sub", lambda x: _weighted(T.sub(x[0], x[1]), wa), [_randn(g, 3, 4), _randn(g, 1, 4)]))
    cases.append(("mul", lambda x: _weighted(T.mul(x[0], x[1]), wa), [_randn(g, 3, 4), _randn(g, 3, 1)]))
    cases.append(("scale", lambda x: _weighted(T.scale(x[0], -1.7), wa), [_randn(g, 3, 4)]))
    cases.append(("neg", lambda x: _weighted(T.neg(x[0]), wa), [_randn(g, 3, 4)]))
    # keep relu inputs away from the kink
    r = g.standard_normal((3, 4))
    r = np.where(np.abs(r) < 0.1, 0.5, r)
    cases.append(("relu", lambda x: _weighted(T.relu(x[0]), wa), [Tensor(r, requires_grad=True)]))
    wr = w(4, 3)
    cases.append(("reshape", lambda x: _weighted(T.reshape(x[0], (4, 3)), wr), [_randn(g, 3, 4)]))
    wt = w(4, 2, 3)
    cases.append(("transpose", lambda x: _weighted(T.transpose(x[0], (2, 0, 1)), wt), [_randn(g, 2, 3, 4)]))
    wc = w(3, 7)
    cases.append(("concat", lambda x: _weighted(T.concat([x[0], x[1]], axis=1), wc),
                  [_randn(g, 3, 4), _randn(g, 3, 3)]))
    ws = w(3, 2)
    cases.append(("slice_axis", lambda x: _weighted(T.slice_axis(x[0], 1, 1, 3), ws), [_randn(g, 3, 4)]))
    wsum = w(3)
    cases.append(("tsum", lambda x: _weighted(T.tsum(x[0], axis=1), wsum), [_randn(g, 3, 4)]))
    wmean = w(1, 4)
    cases.append(("mean", lambda x: _weighted(T.mean(x[0], axis=0, keepdims=True), wmean),
                  [_randn(g, 3, 4)]))
    idx = np.array([2, 0, 2, 1])
    wtk = w(4, 4)
    cases.append(("take", lambda x: _weighted(T.take(x[0], idx), wtk), [_randn(g, 3, 4)]))
    ids = np.array([[1, 3, 1], [0, 4, 2]])
    we = w(2, 3, 4)
    cases.append(("embedding", lambda x: _weighted(T.embedding(x[0], ids), we), [_randn(g, 5, 4)]))
    wm = w(2, 3, 5)
    cases.append(("matmul", lambda x: _weighted(T.matmul(x[0], x[1]), wm),
                  [_randn(g, 2, 3, 4), _randn(g, 2, 4, 5)]))
    cases.append(("matmul_shared", lambda x: _weighted(T.matmul(x[0], x[1]), wm),
                  [_randn(g, 2, 3, 4), _randn(g, 4, 5)]))
    cases.append(("softmax", lambda x: _weighted(T.softmax(x[0]), wa), [_randn(g, 3, 4)]))
    cases.append(("log_softmax", lambda x: _weighted(T.log_softmax(x[0]), wa), [_randn(g, 3, 4)]))
    wl = w(2, 3, 6)
    cases.append(("layer_norm", lambda x: _weighted(T.layer_norm(x[0], x[1], x[2]), wl),
                  [_randn(g, 2, 3, 6), _randn(g, 6), _randn(g, 6)]))
    tgt = np.array([[1, 4, PAD_ID], [0, 2, 3]])
    cases.append(("cross_entropy", lambda x: T.cross_entropy(x[0], tgt, PAD_ID),
                  [_randn(g, 2, 3, PAD_ID + 1)]))
    p = Tensor(g.standard_normal((2, 3, 5)))
    mask = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)
    cases.append(("kl_divergence", lambda x: T.kl_divergence(p, x[0], mask), [_randn(g, 2, 3, 5)]))
    ref = g.standard_normal((3, 4))
    cases.append(("mse", lambda x: T.mse(x[0], ref), [_randn(g, 3, 4)]))
    return cases


def _tiny_batch(cfg: ModelConfig, rng: Rng) -> FinetuneBatch:
    def toks(n):
        return [rng.randint(0, 94) for _ in range(n)]

    instr = np.array([toks(6), toks(5) + [PAD_ID]])
    src = np.array([toks(4), toks(3) + [PAD_ID], toks(4), toks(4)])
    tgt = np.array([toks(3), toks(2) + [PAD_ID], toks(3), toks(3)])
    dec_in = np.concatenate([np.full((4, 1), BOS_ID), tgt[:, :-1]], axis=1)
    dec_in[1, 2] = PAD_ID
    return FinetuneBatch(["t0", "t1"], instr, np.array([0, 0, 1, 1]), src, dec_in, tgt,
                         [("t0", 0), ("t0", 1), ("t1", 0), ("t1", 1)])


def objective_case(cfg: ModelConfig = TINY, seed: int = 0):
    """The three-term finetune loss as a function of the hypernetwork parameters."""
    rng = Rng(derive_seed(seed, "gradcheck"))
    model = Tagi(cfg, rng)
    # perturb the zero-initialized head so every path carries gradient
    for p in model.hyper.parameters():
        if not np.any(p.data):
            p.data = 0.05 * np.asarray(rng.normal(p.data.size)).reshape(p.shape)
    model.backbone.set_trainable(False)
    teachers = {tid: init_teacher_adapters(cfg, Rng(derive_seed(seed, tid)), tid) for tid in ("t0", "t1")}
    for ad in teachers.values():
        for m in ad.lora.values():
            m.B.data = 0.1 * np.asarray(rng.normal(m.B.data.size)).reshape(m.B.shape)
    batch = _tiny_batch(cfg, rng)
    # lambda2 = sigmoid(L_ins) is a non-differentiated weight; finite differences
    # would see it move, so hold it at its value at the base point
    with T.no_grad():
        _, br = finetune_loss(model, batch, TrainConfig(lambda1=5.0), teachers)
    tc = TrainConfig(lambda1=5.0, lambda2_mode="constant", lambda2_const=br.lambda2)
    params = model.hyper_parameters()

    def f(_):
        total, _br = finetune_loss(model, batch, tc, teachers)
        return total

    return f, params


def run_gradcheck(tol: float = 1e-4, h: float = 1e-5, n_samples: int = 64,
                  seed: int = 0) -> list[OpCheck]:
    out = []
    for name, f, xs in op_cases(seed):
        out.append(OpCheck(name, finite_diff_check(f, xs, h=h, tol=tol)))
    f, params = objective_case(TINY, seed)
    out.append(OpCheck("finetune_objective",
                       finite_diff_check(f, params, h=h, tol=tol, n_samples=n_samples,
                                         rng=Rng(derive_seed(seed, "coords")))))
    return out


def format_report(checks: list[OpCheck]) -> str:
    lines = [f"{'op':<20} {'coords':>6} {'pass':>6}  worst (tensor, index, analytic, numeric, rel_err)"]
    for c in checks:
        r = c.report
        wc = r.worst
        worst = (f"({wc.tensor_index}, {wc.flat_index}, {wc.analytic:.6e}, {wc.numeric:.6e}, {wc.rel_error:.2e})"
                 if wc else "-")
        lines.append(f"{c.name:<20} {len(r.coords):>6} {'ok' if c.passed else 'FAIL':>6}  {worst}")
    return "\n".join(lines)
