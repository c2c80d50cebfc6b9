"""Token layout and the additive attention mask over prompt, HOI and image tokens.

Sequence order is prompt, HOI groups (by instance index, then subject,
action, object), noise image, and optionally the source image. Rule sets are
boolean "allowed" matrices over the whole sequence; ``assemble_final_mask``
turns their combination into 0 / NEG_BIG entries.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core.autodiff import NEG_BIG, get_default_dtype
from core.errors import ContractError, DimensionError
from core.hoi_encoder import SEQUENCE_ORDER, HoiInstance

logger = logging.getLogger(__name__)

PROMPT = "prompt"
HOI = "hoi"
IMAGE_NOISE = "image_noise"
IMAGE_SOURCE = "image_source"
IMAGE_KINDS = (IMAGE_NOISE, IMAGE_SOURCE)


@dataclass(frozen=True)
class Segment:
    kind: str
    start: int
    length: int
    role: Optional[str] = None
    instance: Optional[int] = None

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True, eq=False)
class TokenLayout:
    segments: Tuple[Segment, ...]
    grid: Tuple[int, int]
    validity: np.ndarray

    def __post_init__(self):
        offset = 0
        H, W = self.grid
        for seg in self.segments:
            if seg.start != offset:
                raise ContractError(f"segment {seg.kind} starts at {seg.start}, expected {offset}")
            if seg.kind in IMAGE_KINDS and seg.length != H * W:
                raise DimensionError(f"{seg.kind} segment has {seg.length} tokens for a {H}x{W} grid")
            if seg.kind == HOI and (seg.role not in SEQUENCE_ORDER or seg.instance is None):
                raise ContractError(f"HOI segment at {seg.start} lacks a role/instance label")
            offset = seg.stop
        if self.validity.shape != (offset,):
            raise DimensionError(f"validity has shape {self.validity.shape}, layout covers {offset} tokens")
        self.validity.setflags(write=False)

    @property
    def total(self) -> int:
        return int(self.validity.shape[0])

    @property
    def has_source(self) -> bool:
        return any(seg.kind == IMAGE_SOURCE for seg in self.segments)

    def segment(self, kind: str) -> Optional[Segment]:
        for seg in self.segments:
            if seg.kind == kind:
                return seg
        return None

    def hoi_segments(self) -> List[Segment]:
        return [seg for seg in self.segments if seg.kind == HOI]

    def token_labels(self) -> Dict[str, np.ndarray]:
        """Per-token kind, role, instance and image-cell arrays (-1 where not applicable)."""
        n = self.total
        kind = np.empty(n, dtype="<U12")
        role = np.full(n, -1, dtype=np.int64)
        instance = np.full(n, -1, dtype=np.int64)
        cell = np.full(n, -1, dtype=np.int64)
        for seg in self.segments:
            sl = slice(seg.start, seg.stop)
            kind[sl] = seg.kind
            if seg.kind == HOI:
                role[sl] = SEQUENCE_ORDER.index(seg.role)
                instance[sl] = seg.instance
            elif seg.kind in IMAGE_KINDS:
                cell[sl] = np.arange(seg.length)
        return {"kind": kind, "role": role, "instance": instance, "cell": cell}

    @classmethod
    def build(cls, prompt_len: int, instances: Sequence[HoiInstance], grid: Tuple[int, int],
              with_source: bool = False) -> "TokenLayout":
        """Lay out tokens for budgeted instances, ordered by instance index."""
        H, W = grid
        segments, validity = [], []
        offset = 0
        if prompt_len > 0:
            segments.append(Segment(PROMPT, 0, prompt_len))
            validity.append(np.ones(prompt_len, dtype=bool))
            offset = prompt_len
        for inst in sorted(instances, key=lambda i: i.n):
            for role in inst.roles():
                length = inst.tokens(role).shape[0]
                valid = inst.validity.get(role)
                if valid is None:
                    valid = np.ones(length, dtype=bool)
                segments.append(Segment(HOI, offset, length, role=role, instance=inst.n))
                validity.append(np.asarray(valid, dtype=bool))
                offset += length
        kinds = IMAGE_KINDS if with_source else IMAGE_KINDS[:1]
        for kind in kinds:
            segments.append(Segment(kind, offset, H * W))
            validity.append(np.ones(H * W, dtype=bool))
            offset += H * W
        return cls(tuple(segments), (H, W), np.concatenate(validity))


@dataclass(frozen=True, eq=False)
class AttentionMask:
    values: np.ndarray
    layout: TokenLayout

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def allowed(self) -> np.ndarray:
        return self.values == 0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


def build_topology_mask(layout: TokenLayout, structured: bool = True) -> np.ndarray:
    """Allowed HOI↔HOI pairs; entries outside the HOI×HOI block are False.

    Within one instance, subject and object tokens each reach the action
    tokens and their own role group; subject↔object and every cross-instance
    pair are blocked. ``structured=False`` opens all HOI↔HOI pairs.
    """
    labels = layout.token_labels()
    is_hoi = labels["kind"] == HOI
    both = is_hoi[:, None] & is_hoi[None, :]
    if not structured:
        return both
    inst, role = labels["instance"], labels["role"]
    action = SEQUENCE_ORDER.index("action")
    same_instance = inst[:, None] == inst[None, :]
    same_role = role[:, None] == role[None, :]
    via_action = (role[:, None] == action) | (role[None, :] == action)
    return both & same_instance & (same_role | via_action)


def build_grounding_mask(layout: TokenLayout, instances: Iterable[HoiInstance]) -> np.ndarray:
    """Allowed HOI↔image pairs (both directions); entries elsewhere are False.

    A role token sees exactly the image cells of its role region in every
    image segment. Instances without layout see the whole image.
    """
    H, W = layout.grid
    labels = layout.token_labels()
    kind, cell = labels["kind"], labels["cell"]
    is_image = np.isin(kind, IMAGE_KINDS)
    image_idx = np.flatnonzero(is_image)
    by_index = {inst.n: inst for inst in instances}
    allowed = np.zeros((layout.total, layout.total), dtype=bool)
    for seg in layout.hoi_segments():
        inst = by_index.get(seg.instance)
        rows = slice(seg.start, seg.stop)
        if inst is None or not inst.regions:
            allowed[rows, image_idx] = True
            continue
        region = inst.regions.get(seg.role)
        if region is None:
            raise ContractError(f"instance {seg.instance} has layout but no {seg.role} region")
        if region.grid != (H, W):
            raise DimensionError(f"instance {seg.instance} {seg.role} region is on grid {region.grid}, layout uses {(H, W)}")
        inside = np.zeros(H * W, dtype=bool)
        inside[region.flat_indices()] = True
        cols = image_idx[inside[cell[image_idx]]]
        allowed[rows, cols] = True
    # image→HOI mirrors HOI→image
    return allowed | allowed.T


def assemble_final_mask(layout: TokenLayout, instances: Iterable[HoiInstance],
                        structured: bool = True) -> AttentionMask:
    instances = list(instances)
    kind = layout.token_labels()["kind"]
    is_prompt = kind == PROMPT
    is_image = np.isin(kind, IMAGE_KINDS)
    open_tokens = is_prompt | is_image
    # prompt/image tokens attend freely among themselves; prompt↔HOI stays blocked
    allowed = open_tokens[:, None] & open_tokens[None, :]
    allowed |= build_topology_mask(layout, structured=structured)
    allowed |= build_grounding_mask(layout, instances)

    valid = layout.validity
    allowed &= valid[:, None] & valid[None, :]
    np.fill_diagonal(allowed, True)

    isolated = np.flatnonzero(valid & ~allowed.any(axis=1))
    if isolated.size:
        raise ContractError(f"query tokens {isolated[:8].tolist()} have no allowed key")
    values = np.where(allowed, 0.0, NEG_BIG).astype(get_default_dtype())
    logger.debug(f"mask over {layout.total} tokens, {int(allowed.sum())} allowed pairs")
    return AttentionMask(values, layout)
