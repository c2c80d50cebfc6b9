import numpy as np
import pytest

from core.attention_mask import (HOI, IMAGE_KINDS, IMAGE_SOURCE, PROMPT, TokenLayout, assemble_final_mask,
                                 build_grounding_mask, build_topology_mask)
from core.autodiff import NEG_BIG, Tensor
from core.errors import DimensionError
from core.geometry import Box, rasterize, union_region
from core.hoi_encoder import HoiInstance, budget_instances

GRID = (4, 5)


def random_box(rng):
    x0, y0 = rng.uniform(0.0, 0.7, size=2)
    w, h = rng.uniform(0.1, 0.3, size=2)
    return Box(x0, y0, min(1.0, x0 + w), min(1.0, y0 + h))


def random_instance(rng, n, d=4):
    def tokens():
        return Tensor(rng.normal(size=(int(rng.integers(1, 5)), d)))

    with_layout = rng.random() < 0.7
    ro = rasterize(random_box(rng), *GRID)
    if rng.random() < 0.3:
        return HoiInstance(n, object_tokens=tokens(), regions={"object": ro} if with_layout else None)
    rs = rasterize(random_box(rng), *GRID)
    regions = {"subject": rs, "object": ro, "action": union_region(rs, ro)} if with_layout else None
    return HoiInstance(n, object_tokens=tokens(), subject_tokens=tokens(), action_tokens=tokens(), regions=regions)


def oracle_allowed(layout, instances):
    """Pairwise rule check written directly from the layout segments."""
    by_index = {i.n: i for i in instances}
    tokens = []
    for seg in layout.segments:
        for offset in range(seg.length):
            cell = offset if seg.kind in IMAGE_KINDS else None
            tokens.append((seg.kind, seg.role, seg.instance, cell))

    def sees_cell(token, c):
        _, role, n, _ = token
        hoi = by_index[n]
        if not hoi.regions:
            return True
        return c in set(hoi.regions[role].flat_indices().tolist())

    n = len(tokens)
    assert n == layout.total
    allowed = np.zeros((n, n), dtype=bool)
    for i, a in enumerate(tokens):
        for j, b in enumerate(tokens):
            if i == j:
                allowed[i, j] = True
                continue
            if not (layout.validity[i] and layout.validity[j]):
                continue
            if a[0] != HOI and b[0] != HOI:
                allowed[i, j] = True
            elif a[0] == HOI and b[0] == HOI:
                allowed[i, j] = a[2] == b[2] and (a[1] == b[1] or "action" in (a[1], b[1]))
            elif a[0] == HOI:
                allowed[i, j] = sees_cell(a, b[3])
            else:
                allowed[i, j] = sees_cell(b, a[3])
    return allowed


def test_mask_matches_pairwise_oracle(rng):
    seen_counts = set()
    for _ in range(1000):
        instances = [random_instance(rng, n) for n in rng.permutation(int(rng.integers(0, 5)))]
        budgeted, _ = budget_instances(instances, K_hoi=20, L_max=3)
        seen_counts.add(len(budgeted))
        layout = TokenLayout.build(2, budgeted, GRID, with_source=bool(rng.random() < 0.5))
        mask = assemble_final_mask(layout, budgeted)
        assert np.array_equal(mask.allowed, oracle_allowed(layout, budgeted))
        assert set(np.unique(mask.values).tolist()) <= {0.0, NEG_BIG}
        assert np.array_equal(mask.allowed, mask.allowed.T)
    assert seen_counts == {0, 1, 2, 3, 4}


def two_instance_layout(rng, with_source=False):
    rs, ro = rasterize(Box(0, 0, 0.4, 0.5), *GRID), rasterize(Box(0.4, 0.5, 1.0, 1.0), *GRID)
    a = HoiInstance(0, object_tokens=Tensor(rng.normal(size=(2, 4))), subject_tokens=Tensor(rng.normal(size=(1, 4))),
                    action_tokens=Tensor(rng.normal(size=(1, 4))),
                    regions={"subject": rs, "object": ro, "action": union_region(rs, ro)})
    b = HoiInstance(1, object_tokens=Tensor(rng.normal(size=(1, 4))))
    instances = [b, a]
    return TokenLayout.build(3, instances, GRID, with_source=with_source), instances


def test_layout_order_and_labels(rng):
    layout, _ = two_instance_layout(rng, with_source=True)
    kinds = [(seg.kind, seg.role, seg.instance) for seg in layout.segments]
    assert kinds == [
        (PROMPT, None, None),
        (HOI, "subject", 0), (HOI, "action", 0), (HOI, "object", 0),
        (HOI, "object", 1),
        ("image_noise", None, None), (IMAGE_SOURCE, None, None),
    ]
    assert layout.total == 3 + 4 + 1 + 2 * 20
    assert layout.has_source


def test_role_rules_on_a_concrete_layout(rng):
    layout, instances = two_instance_layout(rng)
    allowed = assemble_final_mask(layout, instances).allowed
    subject, action, obj = layout.hoi_segments()[:3]
    other = layout.hoi_segments()[3]
    image = layout.segment("image_noise")
    assert allowed[subject.start, action.start] and allowed[obj.start, action.start]
    assert not allowed[subject.start, obj.start]
    assert not allowed[obj.start, other.start]
    assert not allowed[0, subject.start] and not allowed[subject.start, 0]
    assert allowed[0, image.start]
    # subject box covers the top-left cell only
    assert allowed[subject.start, image.start] and not allowed[subject.start, image.stop - 1]
    # no layout on instance 1: it grounds to every image cell
    assert allowed[other.start, image.start:image.stop].all()


def test_unstructured_topology_opens_every_hoi_pair(rng):
    layout, _ = two_instance_layout(rng)
    is_hoi = layout.token_labels()["kind"] == HOI
    opened = build_topology_mask(layout, structured=False)
    assert np.array_equal(opened, is_hoi[:, None] & is_hoi[None, :])
    assert build_topology_mask(layout).sum() < opened.sum()


def test_padding_tokens_only_see_themselves(rng):
    inst = HoiInstance(0, object_tokens=Tensor(rng.normal(size=(1, 4))))
    budgeted, L = budget_instances([inst], K_hoi=8, L_max=3)
    layout = TokenLayout.build(1, budgeted, GRID)
    allowed = assemble_final_mask(layout, budgeted).allowed
    assert L == 3
    for pad in (2, 3):
        assert allowed[pad].sum() == 1 and allowed[:, pad].sum() == 1


def test_grounding_rejects_region_on_other_grid(rng):
    ro = rasterize(Box(0, 0, 0.5, 0.5), 8, 8)
    inst = HoiInstance(0, object_tokens=Tensor(rng.normal(size=(1, 4))), regions={"object": ro})
    layout = TokenLayout.build(0, [inst], GRID)
    with pytest.raises(DimensionError) as excinfo:
        build_grounding_mask(layout, [inst])
    assert "grid" in str(excinfo.value)


def test_layout_validity_must_cover_every_token():
    layout = TokenLayout.build(2, [], (2, 2))
    with pytest.raises(DimensionError) as excinfo:
        TokenLayout(layout.segments, (2, 2), np.ones(3, dtype=bool))
    assert "validity" in str(excinfo.value)
