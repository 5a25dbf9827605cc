"""Small pre-norm encoder-decoder transformer with LoRA on self-attention Q/V.

All forward functions are batched: token arrays are int [B, T] right-padded
with ``PAD_ID``. LoRA tensors may be unbatched (A [d, r]) and shared by the
whole batch, or batched (A [B, d, r]) with one adapter per example.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, LengthError, VocabularyError
from .rng import Rng
from .tensor import Tensor

PAD_ID, BOS_ID, EOS_ID, SEP_ID = 95, 96, 97, 98
NEG_INF = -1e9

STACKS = ("encoder", "decoder")
PROJS = ("Q", "V")


@dataclass
class ModelConfig:
    vocab_size: int = 99
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 128
    lora_rank: int = 4
    gen_hidden: int = 256
    id_dim: int = 32
    fusion_layers: str = "all"
    ln_eps: float = 1e-5

    def __post_init__(self):
        for k in ("vocab_size", "d_model", "n_enc_layers", "n_dec_layers", "n_heads",
                  "d_ff", "max_len", "gen_hidden", "id_dim"):
            if getattr(self, k) < 1:
                raise ConfigError(f"model.{k} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        if self.lora_rank < 0 or self.lora_rank >= self.d_model:
            raise ConfigError("model.lora_rank must satisfy 0 <= r < d_model")
        if self.fusion_layers not in ("all", "last"):
            raise ConfigError("model.fusion_layers must be 'all' or 'last'")

    @property
    def n_blocks(self) -> int:
        """Self-attention blocks that carry LoRA (encoder + decoder)."""
        return self.n_enc_layers + self.n_dec_layers


def injection_points(cfg: ModelConfig) -> list[tuple[str, int, str]]:
    """Fixed order: encoder layers then decoder layers, Q before V."""
    pts = []
    for stack, n in (("encoder", cfg.n_enc_layers), ("decoder", cfg.n_dec_layers)):
        for l in range(n):
            for p in PROJS:
                pts.append((stack, l, p))
    return pts


def block_index(cfg: ModelConfig, stack: str, layer: int) -> int:
    return layer if stack == "encoder" else cfg.n_enc_layers + layer


def lora_id(block: int, proj: str) -> int:
    """Layer-id used by the adapter generator: 2l for Q, 2l+1 for V."""
    return 2 * block + (0 if proj == "Q" else 1)


# ---------------------------------------------------------------- parameters

class Module:
    """Attribute-walking parameter container (definition order is the name order)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(val, Tensor):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + "/")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}/{i}/")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for n, p in self.named_parameters():
            key = prefix + n
            if key not in state:
                raise KeyError(f"missing tensor {key!r}")
            arr = np.asarray(state[key], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"tensor {key!r}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.copy()


def param(rng: Rng, shape, std: float) -> Tensor:
    n = int(np.prod(shape))
    data = rng.normal(n).reshape(shape) * std if std > 0 else np.zeros(shape)
    return Tensor(data, requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float):
        self.gain = ones((d,))
        self.bias = zeros((d,))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)


class Attention(Module):
    def __init__(self, rng: Rng, d: int, n_heads: int):
        std = 1.0 / math.sqrt(d)
        self.wq = param(rng, (d, d), std)
        self.wk = param(rng, (d, d), std)
        self.wv = param(rng, (d, d), std)
        self.wo = param(rng, (d, d), std)
        self._h = n_heads

    def __call__(self, x: Tensor, ctx: Tensor, mask: np.ndarray,
                 lora_q: "LoraModule | None" = None, lora_v: "LoraModule | None" = None) -> Tensor:
        """Multi-head attention, queries from ``x``, keys/values from ``ctx``.

        ``mask`` is additive and broadcastable to [B, heads, Tq, Tk].
        """
        B, Tq, d = x.shape
        Bk, Tk = ctx.shape[0], ctx.shape[1]
        h = self._h
        dh = d // h
        q = _project(x, self.wq, lora_q)
        k = ctx @ self.wk
        v = _project(ctx, self.wv, lora_v)
        q = T.transpose(T.reshape(q, (B, Tq, h, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(k, (Bk, Tk, h, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(v, (Bk, Tk, h, dh)), (0, 2, 1, 3))
        scores = T.add(T.scale(q @ k, 1.0 / math.sqrt(dh)), mask)
        o = T.softmax(scores) @ v
        o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (B, Tq, d))
        return o @ self.wo


def _project(x: Tensor, w: Tensor, lora: "LoraModule | None") -> Tensor:
    y = x @ w
    if lora is None:
        return y
    delta = (x @ lora.A) @ lora.B
    if lora.scale != 1.0:
        delta = T.scale(delta, lora.scale)
    return y + delta


class FeedForward(Module):
    def __init__(self, rng: Rng, d: int, d_ff: int):
        self.w1 = param(rng, (d, d_ff), 1.0 / math.sqrt(d))
        self.b1 = zeros((d_ff,))
        self.w2 = param(rng, (d_ff, d), 1.0 / math.sqrt(d_ff))
        self.b2 = zeros((d,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2


class EncoderLayer(Module):
    def __init__(self, rng: Rng, cfg: ModelConfig):
        self.ln1 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.attn = Attention(rng, cfg.d_model, cfg.n_heads)
        self.ln2 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.ff = FeedForward(rng, cfg.d_model, cfg.d_ff)


class DecoderLayer(Module):
    def __init__(self, rng: Rng, cfg: ModelConfig):
        self.ln1 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.self_attn = Attention(rng, cfg.d_model, cfg.n_heads)
        self.ln2 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.cross_attn = Attention(rng, cfg.d_model, cfg.n_heads)
        self.ln3 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.ff = FeedForward(rng, cfg.d_model, cfg.d_ff)


# ---------------------------------------------------------------- adapters

@dataclass
class LoraModule:
    """Low-rank pair; the projection gains ``x @ A @ B * scale``."""

    A: Tensor
    B: Tensor
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.A.shape[-1]


@dataclass
class AdapterSet:
    """LoRA modules keyed by (stack, layer, projection).

    Teacher sets hold unbatched [d, r] / [r, k] tensors; generated sets hold
    per-example [B, d, r] / [B, r, k] tensors.
    """

    lora: dict[tuple[str, int, str], LoraModule]
    task_id: str | None = None

    def get(self, stack: str, layer: int, proj: str) -> LoraModule | None:
        return self.lora.get((stack, layer, proj))

    def keys(self):
        return list(self.lora.keys())

    @property
    def batched(self) -> bool:
        return next(iter(self.lora.values())).A.data.ndim == 3

    def ordered(self) -> list[tuple[tuple[str, int, str], LoraModule]]:
        return sorted(self.lora.items(), key=lambda kv: _point_sort_key(kv[0]))

    def parameters(self) -> list[Tensor]:
        out = []
        for _, m in self.ordered():
            out += [m.A, m.B]
        return out

    def num_parameters(self) -> int:
        """Per-task parameter count (batch axis excluded)."""
        n = 0
        for _, m in self.lora.items():
            n += int(np.prod(m.A.shape[-2:])) + int(np.prod(m.B.shape[-2:]))
        return n

    def flatten(self) -> Tensor:
        """Concatenate Q-A, Q-B, V-A, V-B per layer, encoder first.

        Returns [P] for unbatched sets and [B, P] for batched ones.
        """
        parts = []
        for _, m in self.ordered():
            for t in (m.A, m.B):
                if t.data.ndim == 3:
                    parts.append(T.reshape(t, (t.shape[0], -1)))
                else:
                    parts.append(T.reshape(t, (-1,)))
        return T.concat(parts, axis=-1)

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for (stack, l, p), m in self.ordered():
            out[f"{prefix}/{stack}/{l}/{p}/A"] = m.A.data
            out[f"{prefix}/{stack}/{l}/{p}/B"] = m.B.data
        return out

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray], prefix: str, cfg: ModelConfig,
                        task_id: str | None = None) -> "AdapterSet":
        lora = {}
        for stack, l, p in injection_points(cfg):
            A = state[f"{prefix}/{stack}/{l}/{p}/A"]
            B = state[f"{prefix}/{stack}/{l}/{p}/B"]
            lora[(stack, l, p)] = LoraModule(Tensor(A.copy()), Tensor(B.copy()))
        return cls(lora, task_id)


def _point_sort_key(k):
    stack, l, p = k
    return (STACKS.index(stack), l, PROJS.index(p))


def init_teacher_adapters(cfg: ModelConfig, rng: Rng, task_id: str | None = None) -> AdapterSet:
    """Fresh trainable LoRA: A ~ N(0, 1/d), B = 0, so the delta starts at zero."""
    d, r = cfg.d_model, cfg.lora_rank
    lora = {}
    for pt in injection_points(cfg):
        lora[pt] = LoraModule(param(rng, (d, r), 1.0 / math.sqrt(d)), zeros((r, d)))
    return AdapterSet(lora, task_id)


def zero_adapters(cfg: ModelConfig, batch: int | None = None) -> AdapterSet:
    d, r = cfg.d_model, cfg.lora_rank
    pre = () if batch is None else (batch,)
    lora = {pt: LoraModule(Tensor(np.zeros(pre + (d, r))), Tensor(np.zeros(pre + (r, d))))
            for pt in injection_points(cfg)}
    return AdapterSet(lora)


def stack_adapters(sets: list[AdapterSet]) -> AdapterSet:
    """Batch several unbatched sets into one constant per-example set."""
    lora = {}
    for key in sets[0].lora:
        A = np.stack([s.lora[key].A.data for s in sets])
        B = np.stack([s.lora[key].B.data for s in sets])
        lora[key] = LoraModule(Tensor(A), Tensor(B), sets[0].lora[key].scale)
    return AdapterSet(lora)


def lora_param_count(cfg: ModelConfig, rank: int | None = None) -> int:
    """(#blocks) * 2 * r * (d + k) with d = k = d_model."""
    r = cfg.lora_rank if rank is None else rank
    return cfg.n_blocks * 2 * r * (cfg.d_model + cfg.d_model)


# ---------------------------------------------------------------- masks / validation

def pad_mask(pad: np.ndarray) -> np.ndarray:
    """Additive mask [B, 1, 1, Tk] from a bool [B, Tk] padding array."""
    return np.where(pad, NEG_INF, 0.0)[:, None, None, :]


def key_mask(tokens: np.ndarray) -> np.ndarray:
    return pad_mask(tokens == PAD_ID)


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF), k=1)[None, None]


def as_batch(tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    return arr[None] if arr.ndim == 1 else arr


# ---------------------------------------------------------------- backbone

FusionFn = Callable[[int, Tensor], Tensor]


class Transformer(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        self._cfg = cfg
        d = cfg.d_model
        # unit-scale embeddings keep token identity visible next to sublayer outputs
        self.embed = param(rng, (cfg.vocab_size, d), 1.0)
        self.enc_pos = param(rng, (cfg.max_len, d), 1.0)
        self.dec_pos = param(rng, (cfg.max_len, d), 1.0)
        self.enc = [EncoderLayer(rng, cfg) for _ in range(cfg.n_enc_layers)]
        self.enc_ln = LayerNorm(d, cfg.ln_eps)
        self.dec = [DecoderLayer(rng, cfg) for _ in range(cfg.n_dec_layers)]
        self.dec_ln = LayerNorm(d, cfg.ln_eps)

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    def _check(self, tokens: np.ndarray, what: str) -> None:
        if tokens.shape[1] > self.cfg.max_len:
            raise LengthError(f"{what} length {tokens.shape[1]} exceeds max_len {self.cfg.max_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise VocabularyError(f"{what} contains token ids outside [0, {self.cfg.vocab_size})")

    def _embed(self, tokens: np.ndarray, pos: Tensor) -> Tensor:
        n = tokens.shape[1]
        return T.embedding(self.embed, tokens) + T.slice_axis(pos, 0, 0, n)

    def encode(self, tokens, adapters: AdapterSet | None = None,
               fusion: FusionFn | None = None) -> tuple[Tensor, list[Tensor]]:
        """Encoder forward. Returns final hidden states [B, T, d] and per-layer S_l.

        S_l is the residual stream right after the self-attention sublayer;
        ``fusion(l, S_l)`` (when given) replaces it before the feed-forward.
        """
        tokens = as_batch(tokens)
        self._check(tokens, "encoder input")
        mask = key_mask(tokens)
        x = self._embed(tokens, self.enc_pos)
        s_list = []
        for l, layer in enumerate(self.enc):
            lq = adapters.get("encoder", l, "Q") if adapters else None
            lv = adapters.get("encoder", l, "V") if adapters else None
            h = layer.ln1(x)
            s = x + layer.attn(h, h, mask, lq, lv)
            s_list.append(s)
            if fusion is not None:
                s = fusion(l, s)
            x = s + layer.ff(layer.ln2(s))
        return self.enc_ln(x), s_list

    def decode_logits(self, prefix, memory: Tensor, memory_pad: np.ndarray,
                      adapters: AdapterSet | None = None) -> Tensor:
        """Teacher-forced decoder logits [B, T, V] with a causal self-attention mask.

        ``memory_pad`` is a bool [B, M] array marking padded memory slots.
        """
        prefix = as_batch(prefix)
        if memory.shape[1] == 0:
            raise LengthError("decoder memory is empty")
        self._check(prefix, "decoder prefix")
        n = prefix.shape[1]
        self_mask = causal_mask(n) + key_mask(prefix)
        mem_mask = pad_mask(memory_pad)
        x = self._embed(prefix, self.dec_pos)
        for l, layer in enumerate(self.dec):
            lq = adapters.get("decoder", l, "Q") if adapters else None
            lv = adapters.get("decoder", l, "V") if adapters else None
            h = layer.ln1(x)
            x = x + layer.self_attn(h, h, self_mask, lq, lv)
            x = x + layer.cross_attn(layer.ln2(x), memory, mem_mask)
            x = x + layer.ff(layer.ln3(x))
        x = self.dec_ln(x)
        # tied output projection, rescaled by d^-1/2 to match unit-scale embeddings
        return T.scale(x, self.cfg.d_model ** -0.5) @ T.transpose(self.embed, (1, 0))

    def forward(self, src, prefix, adapters: AdapterSet | None = None) -> Tensor:
        """Plain seq2seq logits (no instruction fusion)."""
        src = as_batch(src)
        hidden, _ = self.encode(src, adapters)
        return self.decode_logits(prefix, hidden, src == PAD_ID, adapters)


def greedy_decode(step_logits: Callable[[np.ndarray], np.ndarray], max_new: int) -> list[int]:
    """Argmax decoding from BOS; stops after EOS or ``max_new`` tokens.

    ``step_logits(prefix)`` returns the logits row for the last prefix position.
    np.argmax returns the lowest id on ties.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    prefix = [BOS_ID]
    out: list[int] = []
    for _ in range(max_new):
        tok = int(np.argmax(step_logits(np.asarray([prefix], dtype=np.int64))))
        out.append(tok)
        if tok == EOS_ID:
            break
        prefix.append(tok)
    return out


def greedy_generate(model: Transformer, source, max_new: int,
                    adapters: AdapterSet | None = None) -> list[int]:
    """Greedy seq2seq decoding with the plain backbone (teacher path)."""
    src = as_batch(source)
    with T.no_grad():
        hidden, _ = model.encode(src, adapters)
        pad = src == PAD_ID
        return greedy_decode(
            lambda p: model.decode_logits(p, hidden, pad, adapters).data[0, -1], max_new)
