import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tagi import tensor as T
from tagi.errors import DegenerateInputError, DimensionError
from tagi.hypernet import InstructionEncoding, Tagi, expand, mean_pool
from tagi.model import PAD_ID
from tagi.rng import Rng
from tagi.tensor import FLOPS, Tensor

from conftest import SMALL, TINY


def toks(seed, n, b=1):
    return np.random.default_rng(seed).integers(0, 95, size=(b, n))


@pytest.fixture(scope="module")
def model():
    return Tagi(SMALL, Rng(11))


def test_generated_b_is_zero_at_init(model):
    with T.no_grad():
        ad = model.generate_adapters(model.encode_instruction(toks(1, 8)))
    for m in ad.lora.values():
        assert not np.any(m.B.data)
        assert np.any(m.A.data)


@given(st.integers(0, 5000))
def test_zero_init_student_matches_fused_base(seed):
    """With B = 0 the generated adapters contribute nothing."""
    model = Tagi(TINY, Rng(2))
    instr, src, prefix = toks(seed, 5), toks(seed + 1, 4), toks(seed + 2, 3)
    with T.no_grad():
        gen = model.student_forward(instr, src, prefix).logits.data
        zero = model.student_forward(instr, src, prefix, adapters="zero").logits.data
    assert np.array_equal(gen, zero)


def test_instruction_encoded_once_per_forward(model):
    model.counts = {"instruction_encode": 0, "adapter_generate": 0}
    with T.no_grad():
        model.student_forward(toks(1, 6, b=2), toks(2, 5, b=6), toks(3, 3, b=6),
                              index=[0, 0, 0, 1, 1, 1])
    assert model.counts == {"instruction_encode": 1, "adapter_generate": 1}


def test_instruction_flops_land_in_their_bucket(model):
    FLOPS.reset()
    with T.no_grad():
        model.encode_instruction(toks(1, 6))
    assert FLOPS.buckets.get("instruction_encode", 0) > 0
    assert sum(v for k, v in FLOPS.buckets.items() if k != "instruction_encode") == 0


def test_q_and_v_differ_through_id_embedding(model):
    with T.no_grad():
        ad = model.generate_adapters(model.encode_instruction(toks(4, 7)))
    q = ad.lora[("encoder", 0, "Q")].A.data
    v = ad.lora[("encoder", 0, "V")].A.data
    assert not np.allclose(q, v)


def test_generated_shapes(model):
    with T.no_grad():
        ad = model.generate_adapters(model.encode_instruction(toks(4, 7, b=3)))
    for m in ad.lora.values():
        assert m.A.shape == (3, SMALL.d_model, SMALL.lora_rank)
        assert m.B.shape == (3, SMALL.lora_rank, SMALL.d_model)


def test_mean_pool_ignores_padding():
    r = np.random.default_rng(0)
    states = r.standard_normal((2, 4, 3))
    pad = np.array([[False, False, True, True], [False, False, False, False]])
    got = mean_pool(Tensor(states), pad).data
    np.testing.assert_allclose(got[0], states[0, :2].mean(axis=0))
    np.testing.assert_allclose(got[1], states[1].mean(axis=0))


def test_memory_order_instruction_first(model):
    with T.no_grad():
        enc = model.encode_instruction(toks(1, 5))
        hidden = Tensor(np.random.default_rng(0).standard_normal((1, 3, SMALL.d_model)))
        mem, pad = model.assemble_memory(enc, hidden, np.zeros((1, 3), bool))
    assert mem.shape == (1, 8, SMALL.d_model)
    np.testing.assert_array_equal(mem.data[:, :5], enc.states.data)
    np.testing.assert_array_equal(mem.data[:, 5:], hidden.data)
    assert pad.shape == (1, 8) and not pad.any()


def test_memory_width_mismatch(model):
    enc = InstructionEncoding(Tensor(np.zeros((1, 2, 4))), np.zeros((1, 2), bool))
    with pytest.raises(DimensionError):
        model.assemble_memory(enc, Tensor(np.zeros((1, 3, 5))), np.zeros((1, 3), bool))


def test_fusion_width_mismatch(model):
    enc = InstructionEncoding(Tensor(np.zeros((1, 2, 8))), np.zeros((1, 2), bool))
    with pytest.raises(DimensionError):
        model.hyper.fusion[0](Tensor(np.zeros((1, 3, SMALL.d_model))), enc)


def test_empty_instruction_rejected(model):
    with pytest.raises(DegenerateInputError):
        model.encode_instruction(np.full((1, 3), PAD_ID))
    with pytest.raises(DegenerateInputError):
        model.encode_instruction(np.zeros((1, 0), dtype=int))


def test_fusion_disabled_drops_fusion_params():
    on, off = Tagi(SMALL, Rng(0)), Tagi(SMALL, Rng(0), fusion_enabled=False)
    n_fusion = sum(p.size for f in on.hyper.fusion for p in f.parameters())
    assert n_fusion > 0
    assert sum(p.size for p in on.hyper_parameters()) - sum(p.size for p in off.hyper_parameters()) == n_fusion


def test_fusion_changes_encoder_output():
    on, off = Tagi(SMALL, Rng(0)), Tagi(SMALL, Rng(0), fusion_enabled=False)
    instr, src = toks(1, 6), toks(2, 4)
    with T.no_grad():
        a, _ = on.encode_input(src, on.encode_instruction(instr), None)
        b, _ = off.encode_input(src, off.encode_instruction(instr), None)
    assert not np.allclose(a.data, b.data)


def test_expand_gathers_per_example(model):
    with T.no_grad():
        enc = model.encode_instruction(toks(1, 6, b=2))
        gen = model.generate_adapters(enc)
        enc_b, gen_b = expand(enc, gen, [1, 0, 1])
    np.testing.assert_array_equal(enc_b.states.data[0], enc.states.data[1])
    np.testing.assert_array_equal(enc_b.states.data[1], enc.states.data[0])
    key = ("decoder", 1, "V")
    np.testing.assert_array_equal(gen_b.lora[key].A.data[2], gen.lora[key].A.data[1])


def test_grouped_batch_matches_separate_forwards():
    model = Tagi(TINY, Rng(3))
    for p in model.hyper.parameters():
        if not np.any(p.data):
            p.data = 0.1 * np.random.default_rng(0).standard_normal(p.shape)
    instr = toks(1, 5, b=2)
    src, prefix = toks(2, 4, b=4), toks(3, 3, b=4)
    index = [0, 1, 1, 0]
    with T.no_grad():
        grouped = model.student_forward(instr, src, prefix, index=index).logits.data
        for j, u in enumerate(index):
            single = model.student_forward(instr[u:u + 1], src[j:j + 1], prefix[j:j + 1]).logits.data
            np.testing.assert_allclose(grouped[j:j + 1], single, atol=1e-10)


def test_generate_is_deterministic(model):
    with T.no_grad():
        enc = model.encode_instruction(toks(1, 6))
        ad = model.generate_adapters(enc)
    a = model.generate(enc, ad, toks(2, 5), 5)
    b = model.generate(enc, ad, toks(2, 5), 5)
    assert a == b and 1 <= len(a) <= 5
