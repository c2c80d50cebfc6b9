"""Procedural scene world: vocabulary, renderer, oracle detector and scene sampler.

Latent channels:
  0  subject class level inside a squircle fitted to the subject box
  1  color texture of subject and object, box-relative so it survives relayout
  2  object class level over the object box
  3  action class level plus a class-specific periodic pattern over the
     subject/object union
Background ids set channels 0 and 2 to a negative constant; channels 1 and 3
are zero there.
"""

import logging
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from core.errors import ConfigError, ContractError, DimensionError, NumericError
from core.geometry import Box, LayoutRegion, min_enclosing_box, rasterize, union_region

logger = logging.getLogger(__name__)

SUBJECT_CLASSES = ("person", "child", "woman", "man", "robot", "chef", "player", "rider")
OBJECT_CLASSES = ("cup", "ball", "bench", "bicycle", "dog", "cat", "phone", "book",
                  "bed", "bus", "skateboard", "bottle")
ACTION_CLASSES = ("hold", "ride", "kick", "carry", "throw", "sit_on", "feed", "read",
                  "drink_with", "push")
LARGE_OBJECTS = frozenset({"bench", "bed", "bus", "bicycle"})
N_COLORS = 6
N_BACKGROUNDS = 3
MAX_INSTANCES = 4
CHANNELS = 4

SUBJECT_LEVELS = np.linspace(0.2, 1.0, len(SUBJECT_CLASSES))
OBJECT_LEVELS = np.linspace(0.2, 1.0, len(OBJECT_CLASSES))
ACTION_LEVELS = np.linspace(0.3, 1.0, len(ACTION_CLASSES))
BACKGROUND_LEVELS = (-0.8, -0.6, -0.4)
TEXTURE_AMPLITUDE = 0.6
PATTERN_AMPLITUDE = 0.05

# Canonical object placement per action, in subject-height units:
# (dx, dy, rw, rh) with the subject box of aspect SUBJECT_ASPECT centred at 0.
SUBJECT_ASPECT = 0.5
ACTION_PRIORS = {
    "hold": (0.3, 0.05, 0.3, 0.3),
    "ride": (0.0, 0.35, 0.9, 0.6),
    "kick": (0.35, 0.4, 0.3, 0.3),
    "carry": (0.0, 0.0, 0.45, 0.4),
    "throw": (0.35, -0.35, 0.25, 0.25),
    "sit_on": (0.0, 0.3, 0.8, 0.45),
    "feed": (0.4, 0.3, 0.4, 0.35),
    "read": (0.15, -0.05, 0.35, 0.3),
    "drink_with": (0.15, -0.3, 0.2, 0.25),
    "push": (0.45, 0.1, 0.6, 0.6),
}


class Triplet(NamedTuple):
    subject: Optional[str]
    action: Optional[str]
    object: str


@dataclass(frozen=True)
class SceneInstance:
    """One entity group. Object-only entities leave subject fields and action unset."""

    object: str
    object_box: Box
    object_color: int
    subject: Optional[str] = None
    action: Optional[str] = None
    subject_box: Optional[Box] = None
    subject_color: Optional[int] = None

    @property
    def object_only(self) -> bool:
        return self.subject is None

    @property
    def triplet(self) -> Triplet:
        return Triplet(self.subject, self.action, self.object)


@dataclass(frozen=True)
class SceneSpec:
    instances: Tuple[SceneInstance, ...]
    grid: Tuple[int, int] = (16, 16)
    background: int = 0

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        validate_scene(self)

    def triplets(self) -> List[Triplet]:
        return [inst.triplet for inst in self.instances]


def validate_scene(spec: SceneSpec):
    if len(spec.instances) > MAX_INSTANCES:
        raise ContractError(f"scene has {len(spec.instances)} instances, at most {MAX_INSTANCES} allowed")
    if not 0 <= spec.background < N_BACKGROUNDS:
        raise ContractError(f"background id {spec.background} out of range")
    for i, inst in enumerate(spec.instances):
        if inst.object not in OBJECT_CLASSES:
            raise ContractError(f"instance {i}: unknown object class {inst.object!r}")
        if not 0 <= inst.object_color < N_COLORS:
            raise ContractError(f"instance {i}: object color {inst.object_color} out of range")
        if inst.object_only:
            if inst.action is not None or inst.subject_box is not None:
                raise ContractError(f"instance {i}: object-only entity carries subject fields")
            continue
        if inst.subject not in SUBJECT_CLASSES:
            raise ContractError(f"instance {i}: unknown subject class {inst.subject!r}")
        if inst.action not in ACTION_CLASSES:
            raise ContractError(f"instance {i}: unknown action class {inst.action!r}")
        if inst.subject_box is None or inst.subject_color is None:
            raise ContractError(f"instance {i}: subject needs a box and a color")
        if not 0 <= inst.subject_color < N_COLORS:
            raise ContractError(f"instance {i}: subject color {inst.subject_color} out of range")


@dataclass(frozen=True, eq=False)
class LatentImage:
    """An H×W×C latent. Values must be finite."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise DimensionError(f"latent must be H x W x C, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NumericError("latent contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def grid(self) -> Tuple[int, int]:
        return self.values.shape[:2]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


# ---------------------------------------------------------------- rendering

def color_texture(color: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    kx, ky = 1 + color % 3, color // 3
    return TEXTURE_AMPLITUDE * np.cos(2.0 * np.pi * (kx * u + ky * v) + np.pi / 4.0)


def action_pattern(action_id: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    fx, fy = 1 + action_id % 3, action_id // 3
    return np.cos(2.0 * np.pi * (fx * cols + fy * rows) / 8.0)


def _box_uv(box: Box, rows: np.ndarray, cols: np.ndarray, grid: Tuple[int, int]):
    H, W = grid
    u = ((cols + 0.5) / W - box.x0) / max(box.width, 1e-9)
    v = ((rows + 0.5) / H - box.y0) / max(box.height, 1e-9)
    return u, v


def subject_cells(box: Box, grid: Tuple[int, int]) -> np.ndarray:
    """(k, 2) cells of the squircle |dx|^4 + |dy|^4 <= 1 inscribed in the box."""
    region = rasterize(box, *grid)
    cells = np.array(sorted(region.cells))
    u, v = _box_uv(box, cells[:, 0], cells[:, 1], grid)
    inside = (np.abs(2 * u - 1) ** 4 + np.abs(2 * v - 1) ** 4) <= 1.0
    return cells[inside] if inside.any() else cells


def render_scene(spec: SceneSpec) -> LatentImage:
    """Deterministic latent for a scene; later instances paint over earlier ones."""
    H, W = spec.grid
    latent = np.zeros((H, W, CHANNELS), dtype=np.float64)
    bg = BACKGROUND_LEVELS[spec.background]
    latent[..., 0] = bg
    latent[..., 2] = bg
    for inst in spec.instances:
        o_region = rasterize(inst.object_box, H, W)
        o_cells = np.array(sorted(o_region.cells))
        r, c = o_cells[:, 0], o_cells[:, 1]
        latent[r, c, 2] = OBJECT_LEVELS[OBJECT_CLASSES.index(inst.object)]
        latent[r, c, 1] = color_texture(inst.object_color, *_box_uv(inst.object_box, r, c, spec.grid))
        if inst.object_only:
            continue
        s_cells = subject_cells(inst.subject_box, spec.grid)
        r, c = s_cells[:, 0], s_cells[:, 1]
        latent[r, c, 0] = SUBJECT_LEVELS[SUBJECT_CLASSES.index(inst.subject)]
        latent[r, c, 1] = color_texture(inst.subject_color, *_box_uv(inst.subject_box, r, c, spec.grid))
        action_region = union_region(rasterize(inst.subject_box, H, W), o_region)
        a_cells = np.array(sorted(action_region.cells))
        r, c = a_cells[:, 0], a_cells[:, 1]
        a = ACTION_CLASSES.index(inst.action)
        latent[r, c, 3] = ACTION_LEVELS[a] + PATTERN_AMPLITUDE * action_pattern(a, r, c)
    return LatentImage(latent)


# ---------------------------------------------------------------- oracle detection

@dataclass(frozen=True)
class Detection:
    triplet: Triplet
    subject_box: Optional[Box]
    object_box: Box
    confidence: float
    subject_color: Optional[int] = None
    object_color: Optional[int] = None


@dataclass(frozen=True)
class DetectorConfig:
    threshold: float = 0.5
    tolerance: float = 0.1
    min_cells: int = 3
    action_presence: float = 0.15


def _fit_level(values: np.ndarray, levels: np.ndarray, tolerance: float) -> Tuple[int, float]:
    errors = ((values[:, None] - levels[None, :]) ** 2).mean(axis=0)
    best = int(np.argmin(errors))
    return best, float(np.exp(-errors[best] / tolerance ** 2))


def _fit_action(latent: np.ndarray, cells: np.ndarray, tolerance: float) -> Tuple[int, float]:
    r, c = cells[:, 0], cells[:, 1]
    observed = latent[r, c, 3]
    errors = [
        float(((observed - ACTION_LEVELS[a] - PATTERN_AMPLITUDE * action_pattern(a, r, c)) ** 2).mean())
        for a in range(len(ACTION_CLASSES))
    ]
    best = int(np.argmin(errors))
    return best, float(np.exp(-errors[best] / tolerance ** 2))


def _fit_color(latent: np.ndarray, cells: np.ndarray, box: Box, grid) -> Optional[int]:
    if cells.size == 0:
        return None
    r, c = cells[:, 0], cells[:, 1]
    observed = latent[r, c, 1]
    u, v = _box_uv(box, r, c, grid)
    errors = [float(((observed - color_texture(k, u, v)) ** 2).mean()) for k in range(N_COLORS)]
    return int(np.argmin(errors))


def _components(mask: np.ndarray, min_cells: int) -> List[np.ndarray]:
    labels, count = ndimage.label(mask)
    comps = []
    for k in range(1, count + 1):
        cells = np.argwhere(labels == k)
        if len(cells) >= min_cells:
            comps.append(cells)
    return comps


def _cells_box(cells: np.ndarray, grid) -> Box:
    region = LayoutRegion("mask", tuple(grid), frozenset(map(tuple, cells.tolist())))
    return min_enclosing_box(region)


def oracle_detect(latent: LatentImage, config: DetectorConfig = DetectorConfig()) -> List[Detection]:
    """Recover triplets and boxes from a latent by thresholding and matched filters."""
    values = latent.values
    grid = latent.grid
    tol = config.tolerance

    subjects = []
    for cells in _components(values[..., 0] > 0.0, config.min_cells):
        cls, conf = _fit_level(values[cells[:, 0], cells[:, 1], 0], SUBJECT_LEVELS, tol)
        action, _ = _fit_action(values, cells, tol)
        subjects.append({"cells": cells, "cls": cls, "conf": conf, "action": action})

    objects = []
    for cells in _components(values[..., 2] > 0.0, config.min_cells):
        cls, conf = _fit_level(values[cells[:, 0], cells[:, 1], 2], OBJECT_LEVELS, tol)
        ch3 = values[cells[:, 0], cells[:, 1], 3]
        active = float(np.abs(ch3).mean()) >= config.action_presence
        action = _fit_action(values, cells, tol)[0] if active else None
        objects.append({"cells": cells, "cls": cls, "conf": conf, "action": action})

    # Subjects pair with objects sharing their action, nearest centres first.
    paired = {}
    interacting = [j for j, o in enumerate(objects) if o["action"] is not None]
    if subjects and interacting:
        big = 1e6
        cost = np.full((len(subjects), len(interacting)), big)
        for i, s in enumerate(subjects):
            for jj, j in enumerate(interacting):
                if objects[j]["action"] == s["action"]:
                    cost[i, jj] = float(np.linalg.norm(s["cells"].mean(0) - objects[j]["cells"].mean(0)))
        rows, cols = linear_sum_assignment(cost)
        for i, jj in zip(rows, cols):
            if cost[i, jj] < big:
                paired[i] = interacting[jj]

    detections = []
    for i, j in sorted(paired.items()):
        s, o = subjects[i], objects[j]
        union_cells = np.unique(np.concatenate([
            np.argwhere(_box_mask(_cells_box(s["cells"], grid), grid)),
            np.argwhere(_box_mask(_cells_box(o["cells"], grid), grid)),
        ]), axis=0)
        action, a_conf = _fit_action(values, union_cells, tol)
        conf = min(s["conf"], o["conf"], a_conf)
        if conf < config.threshold:
            continue
        s_box, o_box = _cells_box(s["cells"], grid), _cells_box(o["cells"], grid)
        exposed = o["cells"][values[o["cells"][:, 0], o["cells"][:, 1], 0] <= 0.0]
        detections.append(Detection(
            triplet=Triplet(SUBJECT_CLASSES[s["cls"]], ACTION_CLASSES[action], OBJECT_CLASSES[o["cls"]]),
            subject_box=s_box,
            object_box=o_box,
            confidence=conf,
            subject_color=_fit_color(values, s["cells"], s_box, grid),
            object_color=_fit_color(values, exposed, o_box, grid),
        ))
    for j, o in enumerate(objects):
        if o["action"] is not None or o["conf"] < config.threshold:
            continue
        o_box = _cells_box(o["cells"], grid)
        detections.append(Detection(
            triplet=Triplet(None, None, OBJECT_CLASSES[o["cls"]]),
            subject_box=None,
            object_box=o_box,
            confidence=o["conf"],
            object_color=_fit_color(values, o["cells"], o_box, grid),
        ))
    logger.debug(f"oracle detected {len(detections)} entities")
    return detections


def _box_mask(box: Box, grid) -> np.ndarray:
    return rasterize(box, *grid).to_bitmap()


# ---------------------------------------------------------------- scene sampling

@dataclass
class WorldConfig:
    grid: Tuple[int, int] = (16, 16)
    max_instances: int = 2
    p_object_only: float = 0.1
    scale_range: Tuple[float, float] = (0.6, 1.0)
    detector_threshold: float = 0.5
    detector_tolerance: float = 0.1
    min_cells: int = 3
    identity_threshold: float = 0.75

    def validate(self):
        if not 1 <= self.max_instances <= MAX_INSTANCES:
            raise ConfigError(f"world.max_instances must be in [1, {MAX_INSTANCES}], got {self.max_instances}")
        if not 0.0 <= self.p_object_only < 1.0:
            raise ConfigError(f"world.p_object_only must be in [0, 1), got {self.p_object_only}")
        H, W = self.grid
        if H < 8 or W < 8:
            raise ConfigError(f"world.grid must be at least 8x8, got {self.grid}")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"world.scale_range must satisfy 0 < lo <= hi <= 1, got {self.scale_range}")

    def detector(self) -> DetectorConfig:
        return DetectorConfig(self.detector_threshold, self.detector_tolerance, self.min_cells)


def _slots(n: int, grid: Tuple[int, int], rng: np.random.Generator) -> List[Tuple[int, int, int, int]]:
    """Cell-aligned (r0, c0, r1, c1) slots separated by a two-cell gap."""
    H, W = grid
    if n == 1:
        return [(0, 0, H, W)]
    hr, hc = H // 2, W // 2
    if n == 2:
        if rng.random() < 0.5:
            return [(0, 0, H, hc - 1), (0, hc + 1, H, W)]
        return [(0, 0, hr - 1, W), (hr + 1, 0, H, W)]
    quads = [(0, 0, hr - 1, hc - 1), (0, hc + 1, hr - 1, W), (hr + 1, 0, H, hc - 1), (hr + 1, hc + 1, H, W)]
    order = rng.permutation(4)[:n]
    return [quads[k] for k in sorted(order)]


def _snap(x0, y0, x1, y1, slot, grid) -> Box:
    """Expand to whole cells (at least 2x2) inside the slot."""
    H, W = grid
    r0s, c0s, r1s, c1s = slot
    c0 = int(np.floor(x0 * W + 1e-9))
    c1 = int(np.ceil(x1 * W - 1e-9))
    r0 = int(np.floor(y0 * H + 1e-9))
    r1 = int(np.ceil(y1 * H - 1e-9))
    c0, c1 = _fit_span(c0, c1, c0s, c1s)
    r0, r1 = _fit_span(r0, r1, r0s, r1s)
    return Box(c0 / W, r0 / H, c1 / W, r1 / H)


def _fit_span(a: int, b: int, lo: int, hi: int, minimum: int = 2) -> Tuple[int, int]:
    a, b = max(a, lo), min(b, hi)
    if b - a < minimum:
        b = min(hi, a + minimum)
        a = max(lo, b - minimum)
    return a, b


def _place_interaction(action: str, slot, grid, rng, scale_range) -> Tuple[Box, Box]:
    H, W = grid
    dx, dy, rw, rh = ACTION_PRIORS[action]
    jitter = rng.uniform(0.85, 1.15, size=2)
    rw, rh = rw * jitter[0], rh * jitter[1]
    sw = SUBJECT_ASPECT
    # subject centred at origin with unit height
    s = np.array([-sw / 2, -0.5, sw / 2, 0.5])
    o = np.array([dx - rw / 2, dy - rh / 2, dx + rw / 2, dy + rh / 2])
    ux0, uy0 = min(s[0], o[0]), min(s[1], o[1])
    ux1, uy1 = max(s[2], o[2]), max(s[3], o[3])
    r0, c0, r1, c1 = slot
    slot_w, slot_h = (c1 - c0) / W, (r1 - r0) / H
    scale = min(slot_w / (ux1 - ux0), slot_h / (uy1 - uy0)) * rng.uniform(*scale_range)
    ox = c0 / W + rng.uniform(0.0, slot_w - scale * (ux1 - ux0)) - scale * ux0
    oy = r0 / H + rng.uniform(0.0, slot_h - scale * (uy1 - uy0)) - scale * uy0
    sb = s * scale + np.array([ox, oy, ox, oy])
    ob = o * scale + np.array([ox, oy, ox, oy])
    return _snap(*sb, slot, grid), _snap(*ob, slot, grid)


def _place_object(slot, grid, rng, scale_range) -> Box:
    H, W = grid
    r0, c0, r1, c1 = slot
    slot_w, slot_h = (c1 - c0) / W, (r1 - r0) / H
    w = slot_w * rng.uniform(*scale_range) * 0.6
    h = slot_h * rng.uniform(*scale_range) * 0.6
    x0 = c0 / W + rng.uniform(0.0, slot_w - w)
    y0 = r0 / H + rng.uniform(0.0, slot_h - h)
    return _snap(x0, y0, x0 + w, y0 + h, slot, grid)


def sample_scene(rng: np.random.Generator, config: WorldConfig = WorldConfig(),
                 n_instances: Optional[int] = None, object_only: Optional[bool] = None) -> SceneSpec:
    """Random scene with instances in separate slots and action-specific placement."""
    n = n_instances if n_instances is not None else int(rng.integers(1, config.max_instances + 1))
    instances = []
    for slot in _slots(n, config.grid, rng):
        only = object_only if object_only is not None else bool(rng.random() < config.p_object_only)
        obj = OBJECT_CLASSES[int(rng.integers(len(OBJECT_CLASSES)))]
        if only:
            instances.append(SceneInstance(
                object=obj,
                object_box=_place_object(slot, config.grid, rng, config.scale_range),
                object_color=int(rng.integers(N_COLORS)),
            ))
            continue
        action = ACTION_CLASSES[int(rng.integers(len(ACTION_CLASSES)))]
        sb, ob = _place_interaction(action, slot, config.grid, rng, config.scale_range)
        instances.append(SceneInstance(
            object=obj,
            object_box=ob,
            object_color=int(rng.integers(N_COLORS)),
            subject=SUBJECT_CLASSES[int(rng.integers(len(SUBJECT_CLASSES)))],
            action=action,
            subject_box=sb,
            subject_color=int(rng.integers(N_COLORS)),
        ))
    return SceneSpec(tuple(instances), grid=tuple(config.grid), background=int(rng.integers(N_BACKGROUNDS)))


def with_action(spec: SceneSpec, index: int, action: str) -> SceneSpec:
    inst = spec.instances[index]
    if inst.object_only:
        raise ContractError(f"instance {index} is object-only and has no action to change")
    instances = list(spec.instances)
    instances[index] = replace(inst, action=action)
    return replace(spec, instances=tuple(instances))


def with_boxes(spec: SceneSpec, index: int, subject_box: Box, object_box: Box) -> SceneSpec:
    instances = list(spec.instances)
    instances[index] = replace(spec.instances[index], subject_box=subject_box, object_box=object_box)
    return replace(spec, instances=tuple(instances))
