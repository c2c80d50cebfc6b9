import math

import numpy as np
import pytest
from hypothesis import given
import hypothesis.strategies as st

from core.autodiff import Tensor, precision
from core.errors import ContractError, DimensionError
from core.geometry import Box, fourier_box_embedding, rasterize
from core.hoi_encoder import (INSTANCE_EMBED_DIM, ROLE_INDEX, EncoderParams, HoiInstance, budget_instances,
                              budget_lengths, encode_hoi_tokens, instance_embedding, pad_or_truncate)
from core.rdit import FULL_K_HOI, FULL_L_MAX

D_TEXT = 8


def make_instance(rng, n=0, boxes=True, d=D_TEXT):
    bs, bo = Box(0.1, 0.1, 0.5, 0.9), Box(0.4, 0.5, 0.8, 0.8)
    return HoiInstance(
        n=n,
        subject_tokens=Tensor(rng.normal(size=(2, d))),
        action_tokens=Tensor(rng.normal(size=(1, d))),
        object_tokens=Tensor(rng.normal(size=(2, d))),
        boxes={"subject": bs, "object": bo} if boxes else None,
    )


def open_gate(params, value=0.7):
    params.gate.data = np.asarray(value, dtype=params.gate.dtype)
    return params


def test_instance_embedding():
    zero = instance_embedding(0)
    assert zero.shape == (INSTANCE_EMBED_DIM,)
    assert np.array_equal(zero[0::2], np.zeros(32))
    assert np.array_equal(zero[1::2], np.ones(32))
    assert np.linalg.norm(instance_embedding(1) - instance_embedding(2)) > 0
    codes = np.stack([instance_embedding(n) for n in range(0, 10_000, 97)])
    assert len(np.unique(codes.round(12), axis=0)) == len(codes)


def test_closed_gate_is_identity(rng):
    params = EncoderParams.init(D_TEXT, rng)
    inst = make_instance(rng)
    out = encode_hoi_tokens(inst, params)
    for role in inst.roles():
        assert np.array_equal(out.tokens(role).data, inst.tokens(role).data)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def test_residual_matches_independent_recomputation(rng):
    with precision(np.float64):
        params = open_gate(EncoderParams.init(D_TEXT, rng, init_std=0.3))
        inst = make_instance(rng)
        out = encode_hoi_tokens(inst, params)
        for role in ("subject", "object"):
            h = inst.tokens(role).data
            normed = (h - h.mean(-1, keepdims=True)) / np.sqrt(h.var(-1, keepdims=True) + 1e-5)
            side = np.concatenate([fourier_box_embedding(inst.boxes[role]),
                                   params.role_embeddings.data[ROLE_INDEX[role]], instance_embedding(0)])
            x = np.concatenate([normed, np.tile(side, (h.shape[0], 1))], axis=1)
            mlp = gelu(x @ params.w1.data + params.b1.data) @ params.w2.data + params.b2.data
            assert np.allclose(out.tokens(role).data - h, np.tanh(0.7) * mlp, atol=1e-10)


def test_role_and_instance_separation(rng):
    params = open_gate(EncoderParams.init(D_TEXT, rng, init_std=0.3))
    tokens = Tensor(rng.normal(size=(2, D_TEXT)))
    box = Box(0.2, 0.2, 0.6, 0.6)
    as_subject = HoiInstance(0, object_tokens=tokens, subject_tokens=tokens, boxes={"subject": box, "object": box})
    out = encode_hoi_tokens(as_subject, params)
    assert np.linalg.norm(out.tokens("subject").data - out.tokens("object").data) > 0

    first = encode_hoi_tokens(HoiInstance(0, object_tokens=tokens), params).tokens("object").data
    second = encode_hoi_tokens(HoiInstance(1, object_tokens=tokens), params).tokens("object").data
    assert np.linalg.norm(first - second) > 0


def test_missing_boxes_use_null_embedding(rng):
    params = open_gate(EncoderParams.init(D_TEXT, rng, init_std=0.3))
    boxed = make_instance(np.random.default_rng(5), boxes=True)
    unboxed = make_instance(np.random.default_rng(5), boxes=False)
    assert np.array_equal(boxed.tokens("subject").data, unboxed.tokens("subject").data)
    a = encode_hoi_tokens(boxed, params).tokens("subject").data
    b = encode_hoi_tokens(unboxed, params).tokens("subject").data
    assert a.shape == b.shape
    assert np.linalg.norm(a - b) > 0


def test_token_width_mismatch_raises(rng):
    params = EncoderParams.init(D_TEXT, rng)
    with pytest.raises(DimensionError) as excinfo:
        encode_hoi_tokens(make_instance(rng, d=D_TEXT + 1), params)
    assert "encoder expects" in str(excinfo.value)


def test_budget_lengths_examples():
    assert budget_lengths(9, 4608, 512) == 512
    assert budget_lengths(12, 4608, 512) == 384
    assert budget_lengths(1, 256, 4) == 4
    with pytest.raises(ContractError) as excinfo:
        budget_lengths(0, 4608, 512)
    assert "at least one" in str(excinfo.value)
    with pytest.raises(ContractError):
        budget_lengths(10, 8, 4)


@given(st.integers(1, 64))
def test_budget_law(M):
    L = budget_lengths(M, FULL_K_HOI, FULL_L_MAX)
    assert M * L <= FULL_K_HOI and L <= FULL_L_MAX
    if M <= 9:
        assert L == FULL_L_MAX


def test_pad_or_truncate(rng):
    seq = Tensor(rng.normal(size=(3, 4)))
    padded, valid = pad_or_truncate(seq, 5)
    assert padded.shape == (5, 4)
    assert valid.tolist() == [True, True, True, False, False]
    assert not padded.data[3:].any()

    same, valid = pad_or_truncate(seq, 3)
    assert same is seq and valid.all()

    long = Tensor(rng.normal(size=(8, 4)))
    cut, valid = pad_or_truncate(long, 5)
    assert np.array_equal(cut.data, long.data[:5]) and valid.all()

    with pytest.raises(ContractError):
        pad_or_truncate(seq, 0)


def test_budget_instances_pads_every_role_to_shared_length(rng):
    a, b = make_instance(rng, n=0), HoiInstance(1, object_tokens=Tensor(rng.normal(size=(6, D_TEXT))))
    out, L = budget_instances([a, b], K_hoi=16, L_max=4)
    assert L == 4
    for inst in out:
        for role in inst.roles():
            assert inst.tokens(role).shape == (4, D_TEXT)
    assert out[0].validity["action"].tolist() == [True, False, False, False]
    assert out[1].validity["object"].all()


def test_action_region_must_be_union(rng):
    rs = rasterize(Box(0.0, 0.0, 0.5, 0.5), 8, 8)
    ro = rasterize(Box(0.5, 0.5, 1.0, 1.0), 8, 8)
    tokens = Tensor(rng.normal(size=(1, D_TEXT)))
    with pytest.raises(ContractError) as excinfo:
        HoiInstance(0, object_tokens=tokens, subject_tokens=tokens, action_tokens=tokens,
                    regions={"subject": rs, "object": ro, "action": rs})
    assert "union" in str(excinfo.value)
