"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every differentiable op appends one node to a global tape while grad mode is
on. ``backward(loss)`` walks the tape in reverse, writes ``.grad`` on every
reachable tensor that requires grad, and clears the tape.

Matmuls are counted into ``FLOPS`` (2*m*k*n per product), bucketed by the
currently active phase.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NumericalError
from .rng import Rng

__all__ = [
    "Tensor", "Tape", "FLOPS", "FlopCounter", "no_grad", "is_grad_enabled", "backward",
    "matmul", "add", "sub", "mul", "scale", "neg", "reshape", "transpose", "concat",
    "slice_axis", "tsum", "mean", "relu", "softmax", "log_softmax", "layer_norm",
    "embedding", "take", "cross_entropy", "kl_divergence", "mse", "finite_diff_check",
    "GradCheckReport", "CoordResult", "reset_tape", "TAPE",
]


class FlopCounter:
    """Cumulative matmul FLOPs with per-phase buckets (bucket sum == total)."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.total = 0
        self.buckets: dict[str, int] = {}
        self._phase = "unassigned"

    def add(self, n: int) -> None:
        self.total += n
        self.buckets[self._phase] = self.buckets.get(self._phase, 0) + n

    @contextlib.contextmanager
    def phase(self, name: str):
        prev = self._phase
        self._phase = name
        try:
            yield self
        finally:
            self._phase = prev


FLOPS = FlopCounter()


class _Node:
    __slots__ = ("op", "parents", "out", "backward")

    def __init__(self, op, parents, out, backward):
        self.op = op
        self.parents = parents
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops; inputs always precede their consumers."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


TAPE = Tape()
_grad_enabled = True


def reset_tape() -> None:
    TAPE.clear()


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"tensor shape must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, c: float):
        return scale(self, 1.0 / c)


def _const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: tuple, backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericalError(f"op '{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        TAPE.nodes.append(_Node(op, parents, out, backward))
    else:
        out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; clears the tape afterwards."""
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape (no input requires grad)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    owners: dict[int, Tensor] = {}
    for node in reversed(TAPE.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        for p, pg in zip(node.parents, node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
                owners[k] = p
    for k, g in grads.items():
        t = owners.get(k)
        if t is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
    TAPE.clear()


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _result("add", out, (a, b), lambda g: (
        _unbroadcast(g, sa) if a.requires_grad else None,
        _unbroadcast(g, sb) if b.requires_grad else None,
    ))


def sub(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _result("sub", out, (a, b), lambda g: (
        _unbroadcast(g, sa) if a.requires_grad else None,
        _unbroadcast(-g, sb) if b.requires_grad else None,
    ))


def mul(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return _result("mul", out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
        _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
    ))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_const(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        res = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                res.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            res.append(g[tuple(idx)])
        return res

    return _result("concat", out, tuple(tensors), bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _result("slice", a.data[idx], (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result("sum", out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / float(n))


def take(a: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis`` (indices may repeat)."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, (slice(None),) * axis + (idx,), g)
        return (full,)

    return _result("take", np.take(a.data, idx, axis=axis), (a,), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``weight[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = weight.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _result("embedding", weight.data[ids], (weight,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, broadcasting leading axes."""
    a, b = _const(a), _const(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible") from None
    m, k = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    batch = out.size // (m * n)
    FLOPS.add(2 * m * k * n * batch)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if b.data.ndim == 2:
                ga = g @ b.data.T
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            if b.data.ndim == 2:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result("matmul", out, (a, b), bw)


# ---------------------------------------------------------------- normalisation / probabilities

def softmax(x: Tensor) -> Tensor:
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax over an empty last axis (shape {x.shape})")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax", y, (x,), bw)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"log_softmax over an empty last axis (shape {x.shape})")
    y = _log_softmax_np(x.data)

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax", y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty feature axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _result("layer_norm", out, (x, gain, bias), bw)


# ---------------------------------------------------------------- losses

def cross_entropy(logits: Tensor, targets, pad_id: int | None = None) -> Tensor:
    """Mean NLL of ``targets`` over non-pad positions. logits [..., V], targets [...]."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    V = logits.shape[-1]
    mask = np.ones(targets.shape, dtype=bool) if pad_id is None else targets != pad_id
    n = int(mask.sum())
    if n == 0:
        raise DegenerateInputError("cross_entropy: every target position is padding")
    live = targets[mask]
    if live.min() < 0 or live.max() >= V:
        raise DimensionError(f"cross_entropy: target id outside [0, {V})")
    safe = np.where(mask, targets, 0)
    lsm = _log_softmax_np(logits.data)
    picked = np.take_along_axis(lsm, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / n

    def bw(g):
        p = np.exp(lsm)
        np.put_along_axis(p, safe[..., None], np.take_along_axis(p, safe[..., None], -1) - 1.0, -1)
        return (p * (mask[..., None] * (float(g) / n)),)

    return _result("cross_entropy", np.asarray(loss), (logits,), bw)


def kl_divergence(p_logits: Tensor, q_logits: Tensor, mask=None) -> Tensor:
    """KL(p || q) per position, averaged over unmasked positions.

    p is treated as a fixed target: gradient only reaches ``q_logits``.
    """
    if p_logits.shape != q_logits.shape:
        raise DimensionError(f"kl_divergence: shapes {p_logits.shape} and {q_logits.shape} differ")
    pos_shape = q_logits.shape[:-1]
    mask = np.ones(pos_shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != pos_shape:
        raise DimensionError(f"kl_divergence: mask {mask.shape} vs positions {pos_shape}")
    n = int(mask.sum())
    if n == 0:
        raise DegenerateInputError("kl_divergence: every position is masked")
    logp = _log_softmax_np(p_logits.data)
    logq = _log_softmax_np(q_logits.data)
    p = np.exp(logp)
    per_pos = (p * (logp - logq)).sum(axis=-1)
    loss = (per_pos * mask).sum() / n

    def bw(g):
        return None, (np.exp(logq) - p) * (mask[..., None] * (float(g) / n))

    return _result("kl_divergence", np.asarray(loss), (p_logits, q_logits), bw)


def mse(a: Tensor, b) -> Tensor:
    b = _const(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size
    return _result("mse", np.asarray((diff * diff).sum() / n), (a, b), lambda g: (
        (2.0 * float(g) / n) * diff if a.requires_grad else None,
        (-2.0 * float(g) / n) * diff if b.requires_grad else None,
    ))


# ---------------------------------------------------------------- gradient checking

@dataclass
class CoordResult:
    tensor_index: int
    flat_index: int
    analytic: float
    numeric: float
    rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    h: float
    tol: float
    coords: list[CoordResult] = field(default_factory=list)
    min_pass_fraction: float = 1.0

    @property
    def pass_fraction(self) -> float:
        if not self.coords:
            return 1.0
        return sum(c.passed for c in self.coords) / len(self.coords)

    @property
    def passed(self) -> bool:
        return self.pass_fraction >= self.min_pass_fraction

    @property
    def worst(self) -> CoordResult | None:
        return max(self.coords, key=lambda c: c.rel_error, default=None)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_diff_check(
    f: Callable,
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    n_samples: int | None = None,
    rng: Rng | None = None,
    min_pass_fraction: float = 1.0,
) -> GradCheckReport:
    """Compare autodiff gradients of ``f(x)`` with central differences.

    ``x`` may be one tensor or a list of tensors; ``f`` receives it unchanged
    and must return a scalar tensor. Coordinates are sampled uniformly over
    all entries when ``n_samples`` is given.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    TAPE.clear()
    loss = f(x)
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    sizes = [t.data.size for t in xs]
    total = sum(sizes)
    if n_samples is None or n_samples >= total:
        flat_ids = list(range(total))
    else:
        rng = rng or Rng(0)
        chosen: set[int] = set()
        flat_ids = []
        while len(flat_ids) < n_samples:
            j = rng.randint(0, total - 1)
            if j not in chosen:
                chosen.add(j)
                flat_ids.append(j)
    offsets = np.cumsum([0] + sizes)

    report = GradCheckReport(h=h, tol=tol, min_pass_fraction=min_pass_fraction)
    with no_grad():
        f0 = float(f(x).data)
        f1 = float(f(x).data)
        if f0 != f1:
            raise ContractError(f"function is not deterministic: {f0!r} != {f1!r}")
        for gid in flat_ids:
            ti = int(np.searchsorted(offsets, gid, side="right") - 1)
            j = gid - int(offsets[ti])
            flat = xs[ti].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f(x).data)
            flat[j] = orig - h
            fm = float(f(x).data)
            flat[j] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[ti].reshape(-1)[j])
            err = relative_error(ana, num)
            report.coords.append(CoordResult(ti, j, ana, num, err, err <= tol))
    return report
