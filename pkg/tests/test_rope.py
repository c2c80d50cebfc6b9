import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from core.attention_mask import TokenLayout
from core.autodiff import Tensor, grad_check, precision
from core.errors import ConfigError
from core.hoi_encoder import HoiInstance
from core.rope import (PROMPT_INDEX, RopeIndex, apply_rope, hoi_rope_index, image_rope_indices,
                       layout_rope_indices, rope_tables)

HEAD_DIM = 12


def rotate(x, index):
    return apply_rope(Tensor(x[None, :]), [index]).data[0]


def test_rotation_preserves_norms(rng):
    with precision(np.float64):
        x = rng.normal(size=(2, 6, HEAD_DIM))
        idx = rng.integers(0, 20, size=(6, 3))
        out = apply_rope(Tensor(x), idx).data
        assert np.allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-12)


def test_zero_index_is_identity(rng):
    with precision(np.float64):
        x = rng.normal(size=HEAD_DIM)
        assert np.allclose(rotate(x, PROMPT_INDEX), x, atol=1e-15)


def test_scores_depend_only_on_index_offset(rng):
    with precision(np.float64):
        q, k = rng.normal(size=HEAD_DIM), rng.normal(size=HEAD_DIM)
        p, r = np.array([1, 3, 2]), np.array([0, 5, 7])
        for shift in (np.array([2, 2, 2]), np.array([0, 7, -1]), np.array([5, 0, 11])):
            base = rotate(q, p) @ rotate(k, r)
            moved = rotate(q, p + shift) @ rotate(k, r + shift)
            assert moved == pytest.approx(base, abs=1e-10)


@pytest.mark.parametrize("H, W", [(1, 1), (4, 6), (16, 16), (7, 64), (64, 3), (64, 64)])
def test_hoi_slots_are_distinct_and_off_both_image_streams(H, W):
    image = set(image_rope_indices(H, W)) | set(image_rope_indices(H, W, "source"))
    slots = [hoi_rope_index(n, H, W) for n in range(65)]
    assert len(set(slots)) == 65
    assert all(s.a == 0 and s.x == s.y == max(H, W) + n for n, s in enumerate(slots))
    assert image.isdisjoint(slots)
    assert PROMPT_INDEX not in slots


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 64))
def test_hoi_slot_never_lands_on_an_image_cell(H, W, n):
    slot = hoi_rope_index(n, H, W)
    assert slot not in set(image_rope_indices(H, W)) | set(image_rope_indices(H, W, "source"))
    assert all(hoi_rope_index(m, H, W) != slot for m in range(65) if m != n)


def test_image_indices_are_row_major_per_stream():
    noise = image_rope_indices(2, 3)
    source = image_rope_indices(2, 3, "source")
    assert noise[4] == RopeIndex(0, 1, 1)
    assert [i.a for i in source] == [1] * 6
    assert [(i.x, i.y) for i in source] == [(i.x, i.y) for i in noise]
    with pytest.raises(ConfigError):
        image_rope_indices(2, 3, "depth")


def test_layout_indices_with_and_without_hoi_rope(rng):
    inst = HoiInstance(2, object_tokens=Tensor(rng.normal(size=(2, 4))))
    layout = TokenLayout.build(3, [inst], (2, 2), with_source=True)
    table = layout_rope_indices(layout)
    assert table.shape == (3 + 2 + 8, 3)
    assert not table[:3].any()
    assert table[3:5].tolist() == [[0, 4, 4], [0, 4, 4]]
    assert table[5:9].tolist() == [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]]
    assert table[9:, 0].tolist() == [1, 1, 1, 1]
    assert not layout_rope_indices(layout, use_hoi_rope=False)[3:5].any()


def test_head_dim_must_split_into_three_axes(rng):
    with pytest.raises(ConfigError) as excinfo:
        apply_rope(Tensor(rng.normal(size=(2, 8))), [PROMPT_INDEX] * 2)
    assert "multiple of 6" in str(excinfo.value)
    cos, sin = rope_tables([PROMPT_INDEX] * 2, 6)
    with pytest.raises(ConfigError):
        apply_rope(Tensor(rng.normal(size=(3, 6))), tables=(cos, sin))


def test_rope_gradient(rng):
    with precision(np.float64):
        x = Tensor(rng.normal(size=(4, HEAD_DIM)), requires_grad=True)
        w = rng.normal(size=(4, HEAD_DIM))
        idx = rng.integers(0, 9, size=(4, 3))
        assert grad_check(lambda: (apply_rope(x, idx) * w).sum(), [x]) <= 1e-6
