"""Edit-pair construction and the HOI-correctness plus identity filter."""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from core.geometry import Box
from core.scene_world import (ACTION_CLASSES, DetectorConfig, Detection, LatentImage, SceneSpec, Triplet,
                              oracle_detect, with_action, with_boxes)
from core.errors import DimensionError, SamplingError

logger = logging.getLogger(__name__)

CROP_SIZE = 8
APPEARANCE_CHANNEL = 1


def crop_features(latent: LatentImage, box: Optional[Box], size: int = CROP_SIZE) -> Optional[np.ndarray]:
    """Appearance-channel crop resampled to a box-relative size×size grid, flattened and mean-centred.

    Returns None for a missing or zero-area box.
    """
    if box is None or box.degenerate:
        return None
    H, W = latent.grid
    offsets = (np.arange(size) + 0.5) / size
    rows = np.clip(np.floor((box.y0 + offsets * box.height) * H).astype(int), 0, H - 1)
    cols = np.clip(np.floor((box.x0 + offsets * box.width) * W).astype(int), 0, W - 1)
    crop = latent.values[np.ix_(rows, cols)][..., APPEARANCE_CHANNEL].astype(np.float64).reshape(-1)
    return crop - crop.mean()


def cosine_similarity(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> Optional[float]:
    """None when either vector is missing or has zero norm."""
    if a is None or b is None:
        return None
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return None
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def find_detection(detections, triplet: Triplet) -> Optional[Detection]:
    matches = [d for d in detections if d.triplet == triplet]
    return max(matches, key=lambda d: d.confidence) if matches else None


@dataclass
class EditFilterReport:
    keep: bool
    hoi_correct: bool
    subject_similarity: Optional[float]
    object_similarity: Optional[float]
    detected: Optional[Detection]
    reason: str


def filter_edit_pair(source: LatentImage, edited: LatentImage, target: Triplet, source_boxes: Tuple[Box, Box],
                     threshold: float = 0.75, detector: DetectorConfig = DetectorConfig()) -> EditFilterReport:
    """Keep a pair when the edit realizes ``target`` and both identities survive."""
    if source.grid != edited.grid:
        raise DimensionError(f"source grid {source.grid} differs from edited grid {edited.grid}")
    detected = find_detection(oracle_detect(edited, detector), target)
    hoi_correct = detected is not None
    s_box, o_box = source_boxes
    e_s_box = detected.subject_box if detected else s_box
    e_o_box = detected.object_box if detected else o_box
    s_sim = cosine_similarity(crop_features(source, s_box), crop_features(edited, e_s_box))
    o_sim = cosine_similarity(crop_features(source, o_box), crop_features(edited, e_o_box))
    identity_ok = s_sim is not None and o_sim is not None and s_sim > threshold and o_sim > threshold
    if not hoi_correct:
        reason = "target interaction not detected"
    elif not identity_ok:
        reason = "identity similarity below threshold"
    else:
        reason = "kept"
    return EditFilterReport(hoi_correct and identity_ok, hoi_correct, s_sim, o_sim,
                            detected if hoi_correct else None, reason)


def make_edit_pair(spec: SceneSpec, rng: np.random.Generator, bank=None, instance: Optional[int] = None,
                   p_identity: float = 0.0, new_action: Optional[str] = None) -> SceneSpec:
    """Edited copy of ``spec`` with one interaction's action changed.

    With a geometry bank holding the new (action, object) class, the layout is
    resampled from it as well. Scenes without interactions come back unchanged.
    """
    candidates = [i for i, inst in enumerate(spec.instances) if not inst.object_only]
    if not candidates:
        return spec
    index = instance if instance is not None else candidates[int(rng.integers(len(candidates)))]
    inst = spec.instances[index]
    if new_action is None:
        if rng.random() < p_identity:
            return spec
        others = [a for a in ACTION_CLASSES if a != inst.action]
        new_action = others[int(rng.integers(len(others)))]
    edited = with_action(spec, index, new_action)
    if bank is not None and bank.has((new_action, inst.object)):
        try:
            bs, bo = bank.sample_layout((new_action, inst.object), inst.subject_box, inst.object_box, rng)
            edited = with_boxes(edited, index, bs, bo)
        except SamplingError as exc:
            logger.warning(f"keeping source layout for edit: {exc}")
    return edited
