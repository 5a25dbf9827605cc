"""Instruction -> (fused encoder input, generated LoRA adapters).

The instruction is encoded once by the shared backbone encoder. That
encoding is used three ways: as keys/values for per-layer fusion
cross-attention over the input, as the prefix of the decoder memory, and,
mean-pooled, as the input of the per-block adapter-generating MLPs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateInputError, DimensionError
from .model import (
    PAD_ID, AdapterSet, Attention, LayerNorm, LoraModule, ModelConfig, Module, Transformer,
    as_batch, block_index, greedy_decode, injection_points, lora_id, pad_mask, param, zero_adapters,
    zeros,
)
from .rng import Rng
from .tensor import FLOPS, Tensor


@dataclass
class InstructionEncoding:
    """Encoder output over instruction tokens, [B, s, d], plus its pad mask [B, s]."""

    states: Tensor
    pad: np.ndarray

    @property
    def length(self) -> int:
        return self.states.shape[1]


class CrossAttentionLayer(Module):
    """F = LayerNorm(S + MHA(query=S, key/value=I))."""

    def __init__(self, rng: Rng, cfg: ModelConfig):
        self.attn = Attention(rng, cfg.d_model, cfg.n_heads)
        self.ln = LayerNorm(cfg.d_model, cfg.ln_eps)

    def __call__(self, s: Tensor, enc: InstructionEncoding) -> Tensor:
        if s.shape[-1] != enc.states.shape[-1]:
            raise DimensionError(
                f"fusion: input width {s.shape[-1]} != instruction width {enc.states.shape[-1]}")
        return self.ln(s + self.attn(s, enc.states, pad_mask(enc.pad)))


class GeneratorMLP(Module):
    """Two-layer MLP for one block; Q and V share it via the layer-id embedding.

    The first layer acts on concat(pooled, id_embedding), stored as two
    weight blocks. The output head is split into the A columns and the B
    columns; the B columns start at zero so generated deltas start at zero.
    """

    def __init__(self, rng: Rng, cfg: ModelConfig):
        d, g, r = cfg.d_model, cfg.gen_hidden, cfg.lora_rank
        fan_in = d + cfg.id_dim
        self.w1_x = param(rng, (d, g), 1.0 / math.sqrt(fan_in))
        self.w1_id = param(rng, (cfg.id_dim, g), 1.0 / math.sqrt(fan_in))
        self.b1 = zeros((g,))
        self.w2_a = param(rng, (g, d * r), 2.0 / math.sqrt(g * d))
        self.b2_a = zeros((d * r,))
        self.w2_b = zeros((g, r * d))
        self.b2_b = zeros((r * d,))


class AdapterGenerator(Module):
    def __init__(self, rng: Rng, cfg: ModelConfig):
        self._cfg = cfg
        self.ids = param(rng, (2 * cfg.n_blocks, cfg.id_dim), 1.0)
        self.mlps = [GeneratorMLP(rng, cfg) for _ in range(cfg.n_blocks)]

    def __call__(self, pooled: Tensor) -> AdapterSet:
        """pooled [B, d] -> batched AdapterSet with A [B, d, r], B [B, r, d]."""
        cfg = self._cfg
        Bt, d = pooled.shape
        if d != cfg.d_model:
            raise ConfigError(f"generator expects width {cfg.d_model}, got {d}")
        r = cfg.lora_rank
        x = T.reshape(pooled, (Bt, 1, d))
        lora = {}
        for stack, n in (("encoder", cfg.n_enc_layers), ("decoder", cfg.n_dec_layers)):
            for l in range(n):
                blk = block_index(cfg, stack, l)
                mlp = self.mlps[blk]
                ids = T.slice_axis(self.ids, 0, lora_id(blk, "Q"), lora_id(blk, "V") + 1)  # [2, id]
                h = T.relu(x @ mlp.w1_x + (ids @ mlp.w1_id + mlp.b1))  # [B, 2, g]
                a = T.reshape(h @ mlp.w2_a + mlp.b2_a, (Bt, 2, d, r))
                b = T.reshape(h @ mlp.w2_b + mlp.b2_b, (Bt, 2, r, d))
                for j, proj in enumerate(("Q", "V")):
                    A = T.reshape(T.slice_axis(a, 1, j, j + 1), (Bt, d, r))
                    B = T.reshape(T.slice_axis(b, 1, j, j + 1), (Bt, r, d))
                    lora[(stack, l, proj)] = LoraModule(A, B)
        return AdapterSet(lora)


class Hypernetwork(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        self._cfg = cfg
        layers = range(cfg.n_enc_layers) if cfg.fusion_layers == "all" else [cfg.n_enc_layers - 1]
        self._fusion_at = {l: i for i, l in enumerate(layers)}
        self.fusion = [CrossAttentionLayer(rng, cfg) for _ in layers]
        self.generator = AdapterGenerator(rng, cfg)

    def fusion_layer(self, l: int) -> CrossAttentionLayer | None:
        i = self._fusion_at.get(l)
        return None if i is None else self.fusion[i]


def mean_pool(states: Tensor, pad: np.ndarray) -> Tensor:
    keep = (~pad).astype(np.float64)
    w = keep / keep.sum(axis=1, keepdims=True)
    return T.tsum(T.mul(states, w[..., None]), axis=1)


@dataclass
class StudentOutput:
    logits: Tensor
    adapters: AdapterSet
    instruction: InstructionEncoding


class Tagi(Module):
    """Frozen-able backbone plus hypernetwork, with teacher and student paths."""

    def __init__(self, cfg: ModelConfig, rng: Rng, fusion_enabled: bool = True):
        self._cfg = cfg
        self._fusion_enabled = fusion_enabled
        self.backbone = Transformer(cfg, rng)
        self.hyper = Hypernetwork(cfg, rng)
        self.counts = {"instruction_encode": 0, "adapter_generate": 0}

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    @property
    def fusion_enabled(self) -> bool:
        return self._fusion_enabled

    def hyper_parameters(self) -> list[Tensor]:
        """Parameters that actually participate in the student path."""
        params = []
        if self._fusion_enabled:
            params += [p for f in self.hyper.fusion for p in f.parameters()]
        return params + self.hyper.generator.parameters()

    # ------------------------------------------------------------ pieces

    def encode_instruction(self, tokens) -> InstructionEncoding:
        tokens = as_batch(tokens)
        if tokens.shape[1] == 0 or np.all(tokens == PAD_ID, axis=1).any():
            raise DegenerateInputError("instruction is empty")
        self.counts["instruction_encode"] += 1
        with FLOPS.phase("instruction_encode"):
            states, _ = self.backbone.encode(tokens)
        return InstructionEncoding(states, tokens == PAD_ID)

    def generate_adapters(self, enc: InstructionEncoding) -> AdapterSet:
        self.counts["adapter_generate"] += 1
        with FLOPS.phase("adapter_generate"):
            return self.hyper.generator(mean_pool(enc.states, enc.pad))

    def fuse(self, s: Tensor, enc: InstructionEncoding, layer: int) -> Tensor:
        f = self.hyper.fusion_layer(layer)
        return s if f is None else f(s, enc)

    def encode_input(self, tokens, enc: InstructionEncoding,
                     adapters: AdapterSet | None) -> tuple[Tensor, list[Tensor]]:
        fusion = (lambda l, s: self.fuse(s, enc, l)) if self._fusion_enabled else None
        return self.backbone.encode(tokens, adapters, fusion)

    @staticmethod
    def assemble_memory(enc: InstructionEncoding, hidden: Tensor,
                        input_pad: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Decoder memory (I_x ; F): instruction positions first."""
        if enc.states.shape[-1] != hidden.shape[-1]:
            raise DimensionError(
                f"memory: instruction width {enc.states.shape[-1]} != input width {hidden.shape[-1]}")
        if enc.states.shape[0] != hidden.shape[0] and enc.states.shape[0] == 1:
            # one instruction shared by a batch of inputs
            reps = hidden.shape[0]
            states = T.concat([enc.states] * reps, axis=0)
            ipad = np.repeat(enc.pad, reps, axis=0)
        else:
            states, ipad = enc.states, enc.pad
        return T.concat([states, hidden], axis=1), np.concatenate([ipad, input_pad], axis=1)

    # ------------------------------------------------------------ full paths

    def student_forward(self, instr, src, dec_in, index=None,
                        adapters: str = "generated") -> StudentOutput:
        """Instruction encoded once, reused for fusion, memory and adapter generation.

        ``instr`` holds U distinct instructions; ``index`` [B] maps each example
        to its instruction (None means one instruction per example).
        ``adapters="zero"`` keeps everything but replaces generated LoRA with zeros.
        """
        src = as_batch(src)
        enc = self.encode_instruction(instr)
        gen = self.generate_adapters(enc)
        enc_b, gen_b = expand(enc, gen, index)
        used = gen_b if adapters == "generated" else zero_adapters(self._cfg, src.shape[0])
        logits = self.student_logits_from(enc_b, used, src, dec_in)
        return StudentOutput(logits, gen, enc)

    def student_logits_from(self, enc: InstructionEncoding, adapters: AdapterSet | None,
                            src, dec_in) -> Tensor:
        src = as_batch(src)
        hidden, _ = self.encode_input(src, enc, adapters)
        memory, pad = self.assemble_memory(enc, hidden, src == PAD_ID)
        return self.backbone.decode_logits(dec_in, memory, pad, adapters)

    def teacher_logits(self, full_input, dec_in, adapters: AdapterSet | None) -> Tensor:
        """Backbone + task LoRA on the concatenated (instruction ; input); no fusion."""
        return self.backbone.forward(full_input, dec_in, adapters)

    def generate(self, enc: InstructionEncoding, adapters: AdapterSet | None, src,
                 max_new: int) -> list[int]:
        """Greedy decoding for one input under a fixed instruction encoding."""
        src = as_batch(src)
        with T.no_grad():
            hidden, _ = self.encode_input(src, enc, adapters)
            memory, pad = self.assemble_memory(enc, hidden, src == PAD_ID)
            return greedy_decode(
                lambda p: self.backbone.decode_logits(p, memory, pad, adapters).data[0, -1], max_new)


def expand(enc: InstructionEncoding, gen: AdapterSet, index) -> tuple[InstructionEncoding, AdapterSet]:
    """Gather per-instruction encodings/adapters out to per-example ones."""
    if index is None:
        return enc, gen
    index = np.asarray(index, dtype=np.int64)
    enc_b = InstructionEncoding(T.take(enc.states, index), enc.pad[index])
    lora = {k: LoraModule(T.take(m.A, index), T.take(m.B, index), m.scale)
            for k, m in gen.lora.items()}
    return enc_b, AdapterSet(lora, gen.task_id)


def check_adapter_layout(cfg: ModelConfig, adapters: AdapterSet) -> None:
    if set(adapters.keys()) != set(injection_points(cfg)):
        raise ConfigError("adapter keys do not match the model's injection points")
