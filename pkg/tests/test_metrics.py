import pytest

from core.errors import ContractError, DimensionError
from core.geometry import Box
from core.metrics import (EvalTarget, editability_identity, exhaustive_match_score, greedy_match, hoi_accuracy,
                          hoi_editability, identity_consistency, paired_sign_test, spatial_score)
from core.scene_world import Detection, LatentImage, Triplet

HOLD = Triplet("person", "hold", "cup")
KICK = Triplet("child", "kick", "ball")
BS, BO = Box(0.1, 0.1, 0.4, 0.7), Box(0.3, 0.4, 0.6, 0.7)


def detection(triplet, subject_box, object_box, confidence=1.0):
    return Detection(triplet, subject_box, object_box, confidence)


def random_box(rng):
    x0, y0 = rng.uniform(0.0, 0.6, size=2)
    return Box(x0, y0, x0 + rng.uniform(0.1, 0.4), y0 + rng.uniform(0.1, 0.4))


def test_spatial_score_examples():
    target = EvalTarget(HOLD, BS, BO)
    assert spatial_score(target, [detection(HOLD, BS, BO)]) == 1.0
    assert spatial_score(target, [detection(HOLD, Box(0.7, 0.0, 0.9, 0.05), BO)]) == pytest.approx(0.5)
    assert spatial_score(target, [detection(KICK, BS, BO)]) == 0.0
    assert spatial_score(target, []) == 0.0
    with pytest.raises(ContractError):
        spatial_score(EvalTarget(HOLD), [detection(HOLD, BS, BO)])


def test_object_only_targets_score_the_object_box():
    bench = Triplet(None, None, "bench")
    target = EvalTarget(bench, None, BO)
    assert target.has_boxes
    assert spatial_score(target, [Detection(bench, None, BO, 0.9)]) == 1.0


def test_editability_identity_examples_and_bounds(rng):
    assert editability_identity(0.5, 1.0) == pytest.approx(2 / 3)
    assert editability_identity(0.0, 0.0) == 0.0
    assert editability_identity(1.0, 1.0) == 1.0
    for he, ic in rng.uniform(0.0, 1.0, size=(50, 2)):
        ei = editability_identity(he, ic)
        assert min(he, ic) - 1e-12 <= ei <= (he + ic) / 2 + 1e-12
    with pytest.raises(ContractError):
        editability_identity(-0.1, 0.5)


def test_greedy_matching_equals_exhaustive_assignment(rng):
    triplets = [HOLD, KICK, Triplet("man", "ride", "bicycle"), Triplet("woman", "read", "book")]
    for _ in range(30):
        targets = [EvalTarget(t, random_box(rng), random_box(rng)) for t in triplets[:int(rng.integers(1, 5))]]
        detections = [detection(triplets[int(rng.integers(len(triplets)))], random_box(rng), random_box(rng))
                      for _ in range(int(rng.integers(0, 5)))]
        matched = greedy_match(targets, detections)
        assert sum(score for _, score in matched.values()) == pytest.approx(exhaustive_match_score(targets, detections))
        assert len({di for di, _ in matched.values()}) == len(matched)


def test_accuracy_never_exceeds_editability(rng):
    triplets = [HOLD, KICK]
    for _ in range(100):
        targets, dets = [], []
        for _ in range(int(rng.integers(1, 6))):
            t = EvalTarget(triplets[int(rng.integers(2))], random_box(rng), random_box(rng))
            targets.append(t)
            found = [detection(triplets[int(rng.integers(2))],
                               t.subject_box if rng.random() < 0.5 else random_box(rng),
                               t.object_box if rng.random() < 0.5 else random_box(rng))
                     for _ in range(int(rng.integers(0, 3)))]
            dets.append(found)
        accuracy = hoi_accuracy(targets, dets)
        editability = hoi_editability([(t.triplet, d) for t, d in zip(targets, dets)])
        assert 0.0 <= accuracy <= editability <= 1.0


def test_accuracy_and_editability_examples():
    target = EvalTarget(HOLD, BS, BO)
    shifted = detection(HOLD, BS, Box(0.6, 0.0, 0.9, 0.3))
    assert hoi_accuracy([target], [[detection(HOLD, BS, BO)]]) == 1.0
    assert hoi_accuracy([target], [[shifted]]) == 0.0
    assert hoi_editability([(HOLD, [shifted])]) == 1.0
    assert hoi_editability([(HOLD, [detection(KICK, BS, BO)])]) == 0.0
    assert hoi_accuracy([], []) == 0.0 and hoi_editability([]) == 0.0


def test_identity_consistency(rng):
    values = rng.normal(size=(16, 16, 4))
    source = LatentImage(values)
    same = identity_consistency(source, source, (BS, BO))
    assert same.score == pytest.approx(1.0) and not same.excluded

    flipped = values.copy()
    flipped[..., 1] *= -1.0
    assert identity_consistency(source, LatentImage(flipped), (BS, BO)).score == pytest.approx(-1.0)

    partial = identity_consistency(source, source, (None, BO))
    assert partial.excluded == ["subject"] and partial.score == pytest.approx(1.0)
    assert identity_consistency(source, source, (None, Box(0.2, 0.2, 0.2, 0.2))).score is None

    with pytest.raises(DimensionError):
        identity_consistency(source, LatentImage(values[:8, :8]), (BS, BO))


def test_paired_sign_test():
    result = paired_sign_test([True] * 10 + [False] * 3, [False] * 10 + [False] * 3)
    assert (result.wins, result.losses, result.ties) == (10, 0, 3)
    assert result.p_value == pytest.approx(0.5 ** 10)
    assert paired_sign_test([True, False], [True, False]).p_value == 1.0
    balanced = paired_sign_test([True, False] * 5, [False, True] * 5)
    assert balanced.p_value > 0.5
    with pytest.raises(ContractError):
        paired_sign_test([True], [True, False])


def test_spatial_score_falls_as_boxes_drift_away():
    target = EvalTarget(HOLD, BS, BO)
    scores = []
    for dx in [0.05 * i for i in range(11)]:
        moved = Box(BS.x0 + dx, BS.y0, BS.x1 + dx, BS.y1)
        scores.append(spatial_score(target, [detection(HOLD, moved, BO)]))
    assert scores[0] == 1.0
    assert all(b <= a + 1e-12 for a, b in zip(scores, scores[1:]))
    assert scores[-1] == pytest.approx(0.5)
