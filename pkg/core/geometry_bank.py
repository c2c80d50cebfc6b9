"""Per-interaction Gaussian statistics over relative box geometry, and layout proposals.

Each (action, object) class holds a 5-D Gaussian over (dx, dy, rw, rh, iou):
centre displacement and object size, all in units of the subject's height,
plus the subject/object IoU.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from core.errors import ContractError, SamplingError
from core.geometry import Box, iou
from core.scene_world import LARGE_OBJECTS, SceneSpec

logger = logging.getLogger(__name__)

ClassKey = Tuple[str, str]

LARGE = "large"
SMALL = "small"
MIN_ASPECT, MAX_ASPECT = 0.1, 10.0
MIN_AREA, MAX_AREA = 0.002, 0.95
MAX_ATTEMPTS = 100


def relative_geometry(bs: Box, bo: Box) -> np.ndarray:
    hs = bs.height
    if hs <= 0.0:
        raise ContractError(f"subject box {bs.as_tuple()} has zero height")
    (csx, csy), (cox, coy) = bs.center, bo.center
    return np.array([(cox - csx) / hs, (coy - csy) / hs, bo.width / hs, bo.height / hs, iou(bs, bo)])


@dataclass
class BankEntry:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(5)
        self.cov = np.asarray(self.cov, dtype=np.float64).reshape(5, 5)
        if not np.allclose(self.cov, self.cov.T, atol=1e-12):
            raise ContractError("bank covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-9:
            raise ContractError("bank covariance must be positive semi-definite")

    def factor(self) -> np.ndarray:
        """Square-root factor A with A Aᵀ = cov; exactly zero for a zero covariance."""
        vals, vecs = np.linalg.eigh(self.cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))[None, :]


def size_category(object_class: str) -> str:
    return LARGE if object_class in LARGE_OBJECTS else SMALL


@dataclass
class GeometryBank:
    entries: Dict[ClassKey, BankEntry] = field(default_factory=dict)
    categories: Dict[str, str] = field(default_factory=dict)
    unfit: Dict[ClassKey, int] = field(default_factory=dict)

    def has(self, key: ClassKey) -> bool:
        return tuple(key) in self.entries

    def category(self, object_class: str) -> str:
        return self.categories.get(object_class, size_category(object_class))

    def sample_layout(self, key: ClassKey, bs: Box, bo: Box, rng: np.random.Generator,
                      mode: Optional[str] = None) -> Tuple[Box, Box]:
        return sample_layout(self, key, bs, bo, rng, mode=mode)


def fit_entry(vectors: np.ndarray, ridge: float = 1e-6) -> BankEntry:
    """Sample mean and unbiased covariance of (n, 5) vectors, plus ridge * I."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != 5 or len(vectors) < 2:
        raise ContractError(f"need at least two 5-vectors to fit, got shape {vectors.shape}")
    # canonical row order so the fit does not depend on sample order
    vectors = vectors[np.lexsort(vectors.T[::-1])]
    mean = vectors.mean(axis=0)
    centred = vectors - mean
    cov = centred.T @ centred / (len(vectors) - 1)
    cov = 0.5 * (cov + cov.T) + ridge * np.eye(5)
    return BankEntry(mean, cov, len(vectors))


def fit_geometry_bank(samples: Iterable[Tuple[ClassKey, Box, Box]], ridge: float = 1e-6,
                      min_samples: int = 2) -> GeometryBank:
    """Mean and ridge-regularized covariance per class; sparse classes go to ``bank.unfit``."""
    grouped: Dict[ClassKey, List[np.ndarray]] = {}
    for key, bs, bo in samples:
        grouped.setdefault(tuple(key), []).append(relative_geometry(bs, bo))
    bank = GeometryBank()
    for key in sorted(grouped):
        vectors = np.array(grouped[key])
        if len(vectors) < min_samples:
            bank.unfit[key] = len(vectors)
            continue
        bank.entries[key] = fit_entry(vectors, ridge)
        bank.categories[key[1]] = size_category(key[1])
    if bank.unfit:
        logger.warning(f"{len(bank.unfit)} classes had fewer than {min_samples} samples: {sorted(bank.unfit)}")
    return bank


def scene_geometry_samples(scenes: Iterable[SceneSpec]) -> List[Tuple[ClassKey, Box, Box]]:
    return [((inst.action, inst.object), inst.subject_box, inst.object_box)
            for spec in scenes for inst in spec.instances if not inst.object_only]


def plausible(box: Box) -> bool:
    if box.width <= 0 or box.height <= 0:
        return False
    aspect = box.width / box.height
    return MIN_ASPECT <= aspect <= MAX_ASPECT and MIN_AREA <= box.area <= MAX_AREA


def _solve(draw: np.ndarray, bs: Box, bo: Box, mode: str, rng: np.random.Generator) -> Optional[Tuple[Box, Box]]:
    dx, dy, rw, rh, _ = draw
    if rw <= 0 or rh <= 0:
        return None
    if mode == LARGE:
        h_s = bo.height / rh
        w_s = h_s * bs.width / bs.height
        cox, coy = bo.center
        cx, cy = cox - dx * h_s, coy - dy * h_s
        coords = (cx - w_s / 2, cy - h_s / 2, cx + w_s / 2, cy + h_s / 2)
        return (Box(*coords), bo) if Box.fits(*coords) else None
    subject = bs
    if mode == "both":
        cx = rng.uniform(bs.width / 2, 1.0 - bs.width / 2)
        cy = rng.uniform(bs.height / 2, 1.0 - bs.height / 2)
        coords = (cx - bs.width / 2, cy - bs.height / 2, cx + bs.width / 2, cy + bs.height / 2)
        if not Box.fits(*coords):
            return None
        subject = Box(*coords)
    h_s = subject.height
    csx, csy = subject.center
    cx, cy = csx + dx * h_s, csy + dy * h_s
    w_o, h_o = rw * h_s, rh * h_s
    coords = (cx - w_o / 2, cy - h_o / 2, cx + w_o / 2, cy + h_o / 2)
    return (subject, Box(*coords)) if Box.fits(*coords) else None


def sample_layout(bank: GeometryBank, key: ClassKey, bs: Box, bo: Box, rng: np.random.Generator,
                  mode: Optional[str] = None, max_attempts: int = MAX_ATTEMPTS) -> Tuple[Box, Box]:
    """Propose (subject, object) boxes from the class Gaussian.

    Large objects keep ``bo`` and solve the subject; small objects keep ``bs``
    and solve the object; ``mode="both"`` also moves the subject.
    """
    key = tuple(key)
    if key not in bank.entries:
        raise ContractError(f"class {key} is not in the geometry bank")
    entry = bank.entries[key]
    mode = mode or bank.category(key[1])
    if mode not in (LARGE, SMALL, "both"):
        raise ContractError(f"unknown sampling mode {mode!r}")
    factor = entry.factor()
    for attempt in range(max_attempts):
        draw = entry.mean + factor @ rng.standard_normal(5)
        proposal = _solve(draw, bs, bo, mode, rng)
        if proposal is not None and all(plausible(b) for b in proposal):
            logger.debug(f"layout for {key} accepted after {attempt + 1} draws")
            return proposal
    raise SamplingError(f"no plausible layout for {key} after {max_attempts} draws")
