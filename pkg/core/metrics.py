"""Layout, interaction and identity metrics over oracle detections."""

import logging
from dataclasses import dataclass, field
from itertools import permutations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import binomtest

from core.edit_filter import cosine_similarity, crop_features
from core.errors import ContractError, DimensionError
from core.geometry import Box, iou
from core.scene_world import Detection, LatentImage, Triplet

logger = logging.getLogger(__name__)

REGION_IOU = 0.5


@dataclass(frozen=True)
class EvalTarget:
    triplet: Triplet
    subject_box: Optional[Box] = None
    object_box: Optional[Box] = None
    source: Optional[str] = None

    @property
    def has_boxes(self) -> bool:
        return self.object_box is not None and (self.subject_box is not None or self.triplet.subject is None)


def pair_miou(target: EvalTarget, det: Detection) -> float:
    """Mean of subject and object IoU; object-only targets use the object IoU alone."""
    o = iou(target.object_box, det.object_box)
    if target.subject_box is None or det.subject_box is None:
        return o
    return 0.5 * (iou(target.subject_box, det.subject_box) + o)


def spatial_score(target: EvalTarget, detections: Sequence[Detection]) -> float:
    if not target.has_boxes:
        raise ContractError("spatial_score needs a target with boxes")
    scores = [pair_miou(target, d) for d in detections if d.triplet == target.triplet]
    return max(scores) if scores else 0.0


def greedy_match(targets: Sequence[EvalTarget], detections: Sequence[Detection]) -> Dict[int, Tuple[int, float]]:
    """Assign each target at most one same-triplet detection, highest mIoU first."""
    candidates = sorted(
        ((pair_miou(t, d), ti, di) for ti, t in enumerate(targets) for di, d in enumerate(detections)
         if d.triplet == t.triplet),
        key=lambda c: (-c[0], c[1], c[2]),
    )
    used_t, used_d, out = set(), set(), {}
    for score, ti, di in candidates:
        if ti in used_t or di in used_d:
            continue
        out[ti] = (di, score)
        used_t.add(ti)
        used_d.add(di)
    return out


def exhaustive_match_score(targets: Sequence[EvalTarget], detections: Sequence[Detection]) -> float:
    """Best total mIoU over all one-to-one assignments (reference for small scenes)."""
    n = len(targets)
    padded = list(range(len(detections))) + [None] * n
    best = 0.0
    for perm in set(permutations(padded, n)):
        total = 0.0
        for ti, di in enumerate(perm):
            if di is not None and detections[di].triplet == targets[ti].triplet:
                total += pair_miou(targets[ti], detections[di])
        best = max(best, total)
    return best


def hoi_success(target: EvalTarget, detections: Sequence[Detection], threshold: float = REGION_IOU) -> bool:
    for d in detections:
        if d.triplet != target.triplet:
            continue
        if iou(target.object_box, d.object_box) < threshold:
            continue
        if target.subject_box is not None and (d.subject_box is None or iou(target.subject_box, d.subject_box) < threshold):
            continue
        return True
    return False


def hoi_accuracy(targets: Sequence[EvalTarget], detections: Sequence[Sequence[Detection]],
                 threshold: float = REGION_IOU) -> float:
    """Share of targets whose triplet is detected with both boxes at IoU >= threshold.

    ``detections[i]`` is the detection list of the image generated for ``targets[i]``.
    """
    if not targets:
        return 0.0
    return float(np.mean([hoi_success(t, d, threshold) for t, d in zip(targets, detections)]))


def hoi_editability(results: Sequence[Tuple[Triplet, Sequence[Detection]]]) -> float:
    """Share of edits whose target triplet is detected anywhere in the edited image."""
    if not results:
        return 0.0
    return float(np.mean([any(d.triplet == triplet for d in dets) for triplet, dets in results]))


@dataclass
class IdentityResult:
    score: Optional[float]
    subject_similarity: Optional[float]
    object_similarity: Optional[float]
    excluded: List[str] = field(default_factory=list)


def identity_consistency(source: LatentImage, edited: LatentImage, source_boxes: Tuple[Optional[Box], Box],
                         edited_boxes: Optional[Tuple[Optional[Box], Box]] = None) -> IdentityResult:
    """Mean of subject and object crop similarities; empty crops are excluded and reported."""
    if source.grid != edited.grid:
        raise DimensionError(f"source grid {source.grid} differs from edited grid {edited.grid}")
    edited_boxes = edited_boxes or source_boxes
    sims, excluded = {}, []
    for role, sb, eb in zip(("subject", "object"), source_boxes, edited_boxes):
        sim = cosine_similarity(crop_features(source, sb), crop_features(edited, eb))
        if sim is None:
            excluded.append(role)
        sims[role] = sim
    if excluded:
        logger.warning(f"identity consistency excluded empty {', '.join(excluded)} crop(s)")
    kept = [s for s in sims.values() if s is not None]
    score = float(np.mean(kept)) if kept else None
    return IdentityResult(score, sims["subject"], sims["object"], excluded)


def editability_identity(he: float, ic: float) -> float:
    """Harmonic mean of editability and identity consistency (0 when both are 0)."""
    if he < 0 or ic < 0:
        raise ContractError(f"editability and identity must be non-negative, got {he}, {ic}")
    if he + ic == 0:
        return 0.0
    return 2.0 * he * ic / (he + ic)


@dataclass
class SignTestResult:
    wins: int
    losses: int
    ties: int
    p_value: float


def paired_sign_test(a: Sequence[bool], b: Sequence[bool]) -> SignTestResult:
    """One-sided sign test that ``a`` succeeds more often than ``b`` on paired samples."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"paired outcomes differ in length: {a.shape} vs {b.shape}")
    wins = int(np.sum(a & ~b))
    losses = int(np.sum(~a & b))
    ties = int(a.size - wins - losses)
    n = wins + losses
    p = binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
    return SignTestResult(wins, losses, ties, float(p))
