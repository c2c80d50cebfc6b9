"""Conditioning records fed to the denoiser, and the token vocabulary behind them."""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.errors import ContractError
from core.geometry import Box
from core.scene_world import (ACTION_CLASSES, N_BACKGROUNDS, N_COLORS, OBJECT_CLASSES, SUBJECT_CLASSES,
                              SceneSpec)

logger = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"


@dataclass(frozen=True)
class Vocabulary:
    """Learned-embedding vocabulary over synthetic entity, action, color and background labels."""

    tokens: Tuple[str, ...]

    @classmethod
    def default(cls) -> "Vocabulary":
        tokens = [PAD_TOKEN]
        tokens += [f"<bg_{i}>" for i in range(N_BACKGROUNDS)]
        tokens += [f"<color_{k}>" for k in range(N_COLORS)]
        tokens += list(SUBJECT_CLASSES) + list(OBJECT_CLASSES) + list(ACTION_CLASSES)
        return cls(tuple(tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise ContractError(f"token {token!r} is not in the vocabulary") from None

    def ids(self, tokens) -> Tuple[int, ...]:
        return tuple(self.id(t) for t in tokens)

    def decode(self, ids) -> List[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class HoiSpec:
    """Token ids and optional layout for one instance, before embedding.

    ``masks`` maps a role to a boolean bitmap and takes precedence over the box
    of the same role.
    """

    n: int
    object_ids: Tuple[int, ...]
    subject_ids: Optional[Tuple[int, ...]] = None
    action_ids: Optional[Tuple[int, ...]] = None
    boxes: Optional[Dict[str, Box]] = None
    masks: Optional[Dict[str, np.ndarray]] = None

    @property
    def has_layout(self) -> bool:
        return bool(self.boxes) or bool(self.masks)

    @property
    def object_only(self) -> bool:
        return self.subject_ids is None and self.action_ids is None

    def without_layout(self) -> "HoiSpec":
        return replace(self, boxes=None, masks=None)

    def as_object_only(self) -> "HoiSpec":
        boxes = {"object": self.boxes["object"]} if self.boxes and "object" in self.boxes else None
        masks = {"object": self.masks["object"]} if self.masks and "object" in self.masks else None
        return replace(self, subject_ids=None, action_ids=None, boxes=boxes, masks=masks)


@dataclass(frozen=True)
class Conditioning:
    prompt_ids: Tuple[int, ...]
    hois: Tuple[HoiSpec, ...]

    def __post_init__(self):
        seen = [h.n for h in self.hois]
        if len(set(seen)) != len(seen):
            raise ContractError(f"duplicate instance indices {seen}")

    @classmethod
    def null(cls) -> "Conditioning":
        return cls((), ())

    @property
    def is_null(self) -> bool:
        return not self.prompt_ids and not self.hois

    @property
    def has_layout(self) -> bool:
        return any(h.has_layout for h in self.hois)

    def drop_layout(self) -> "Conditioning":
        return replace(self, hois=tuple(h.without_layout() for h in self.hois))

    def drop_hoi_labels(self) -> "Conditioning":
        return replace(self, hois=tuple(h.as_object_only() for h in self.hois))

    def drop_prompt(self) -> "Conditioning":
        return replace(self, prompt_ids=())


@dataclass(frozen=True)
class DropFlags:
    """Which modalities to remove; removing all three yields the null conditioning."""

    layout: bool = False
    hoi: bool = False
    prompt: bool = False

    @classmethod
    def all(cls) -> "DropFlags":
        return cls(True, True, True)

    @property
    def everything(self) -> bool:
        return self.layout and self.hoi and self.prompt

    def apply(self, cond: Conditioning) -> Conditioning:
        if self.everything:
            return Conditioning.null()
        if self.layout:
            cond = cond.drop_layout()
        if self.hoi:
            cond = cond.drop_hoi_labels()
        if self.prompt:
            cond = cond.drop_prompt()
        return cond


def prompt_tokens(spec: SceneSpec) -> List[str]:
    words = [f"<bg_{spec.background}>"]
    for inst in spec.instances:
        if not inst.object_only:
            words += [f"<color_{inst.subject_color}>", inst.subject, inst.action]
        words += [f"<color_{inst.object_color}>", inst.object]
    return words


def conditioning_from_scene(spec: SceneSpec, vocab: Vocabulary, with_layout: bool = True,
                            prompt_len: Optional[int] = None) -> Conditioning:
    """Prompt plus one HoiSpec per scene instance, indexed in scene order."""
    prompt = vocab.ids(prompt_tokens(spec))
    if prompt_len is not None and len(prompt) > prompt_len:
        logger.warning(f"prompt for {len(spec.instances)} instances has {len(prompt)} tokens, truncated to "
                       f"prompt_len={prompt_len}")
        prompt = prompt[:prompt_len]
    hois = []
    for n, inst in enumerate(spec.instances):
        object_ids = vocab.ids([f"<color_{inst.object_color}>", inst.object])
        boxes = {"object": inst.object_box} if with_layout else None
        if inst.object_only:
            hois.append(HoiSpec(n, object_ids, boxes=boxes))
            continue
        if with_layout:
            boxes["subject"] = inst.subject_box
        hois.append(HoiSpec(
            n,
            object_ids,
            subject_ids=vocab.ids([f"<color_{inst.subject_color}>", inst.subject]),
            action_ids=vocab.ids([inst.action]),
            boxes=boxes,
        ))
    return Conditioning(tuple(prompt), tuple(hois))
