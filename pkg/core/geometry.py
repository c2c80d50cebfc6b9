"""Boxes, latent-grid regions and box embeddings.

Coordinates are normalized to [0, 1] with x along grid columns and y along
grid rows. A cell (row, col) on an H×W grid covers
[col/W, (col+1)/W) × [row/H, (row+1)/H).
"""

import logging
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, Optional, Tuple, Union

import numpy as np

from core.errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]
Grid = Tuple[int, int]

FOURIER_FREQUENCIES = 32
BOX_EMBED_DIM = 4 * FOURIER_FREQUENCIES * 2


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(np.isfinite(c) for c in coords):
            raise ContractError(f"Box coordinates must be finite, got {coords}")
        if min(coords) < 0.0 or max(coords) > 1.0:
            raise ContractError(f"Box coordinates must lie in [0, 1], got {coords}")
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ContractError(f"Box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    @property
    def degenerate(self) -> bool:
        return self.width <= 0.0 or self.height <= 0.0

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def rounded(self, digits: int = 4) -> "Box":
        return Box(*(round(c, digits) for c in self.as_tuple()))

    def translated(self, dx: float, dy: float) -> "Box":
        return Box(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)

    @staticmethod
    def fits(x0: float, y0: float, x1: float, y1: float) -> bool:
        """True when the corners would make a valid positive-area box."""
        coords = (x0, y0, x1, y1)
        return (all(np.isfinite(coords)) and min(coords) >= 0.0 and max(coords) <= 1.0
                and x1 > x0 and y1 > y0)


def cell_box(cell: Cell, grid: Grid) -> Box:
    r, c = cell
    H, W = grid
    return Box(c / W, r / H, (c + 1) / W, (r + 1) / H)


def _enclosing(cells: Iterable[Cell], grid: Grid) -> Box:
    rows = [r for r, _ in cells]
    cols = [c for _, c in cells]
    H, W = grid
    return Box(min(cols) / W, min(rows) / H, (max(cols) + 1) / W, (max(rows) + 1) / H)


@dataclass(frozen=True)
class LayoutRegion:
    """A set of latent-grid cells standing for one role's spatial extent."""

    kind: str
    grid: Grid
    cells: FrozenSet[Cell]
    enclosing_box: Box = field(default=None)
    degenerate: bool = False

    def __post_init__(self):
        if self.kind not in ("box", "mask"):
            raise ContractError(f"LayoutRegion kind must be 'box' or 'mask', got {self.kind!r}")
        H, W = self.grid
        if H < 1 or W < 1:
            raise DimensionError(f"grid must be at least 1x1, got {self.grid}")
        if not self.cells:
            raise ContractError("LayoutRegion must contain at least one cell")
        for r, c in self.cells:
            if not (0 <= r < H and 0 <= c < W):
                raise DimensionError(f"cell ({r}, {c}) lies outside the {H}x{W} grid")
        if self.enclosing_box is None:
            object.__setattr__(self, "enclosing_box", _enclosing(self.cells, self.grid))

    def __len__(self) -> int:
        return len(self.cells)

    def to_bitmap(self) -> np.ndarray:
        bitmap = np.zeros(self.grid, dtype=bool)
        rows, cols = zip(*self.cells)
        bitmap[list(rows), list(cols)] = True
        return bitmap

    def flat_indices(self) -> np.ndarray:
        """Row-major cell indices, matching the order of image tokens."""
        W = self.grid[1]
        return np.array(sorted(r * W + c for r, c in self.cells), dtype=np.int64)


def _cell_centers(H: int, W: int) -> Tuple[np.ndarray, np.ndarray]:
    cy = (np.arange(H) + 0.5) / H
    cx = (np.arange(W) + 0.5) / W
    return cy, cx


def _nearest_cell(x: float, y: float, H: int, W: int) -> Cell:
    return (int(np.clip(np.floor(y * H), 0, H - 1)), int(np.clip(np.floor(x * W), 0, W - 1)))


def _bitmap_cells(bitmap: np.ndarray, H: int, W: int) -> Tuple[FrozenSet[Cell], bool]:
    bitmap = np.asarray(bitmap, dtype=bool)
    if bitmap.ndim != 2 or bitmap.size == 0:
        raise DimensionError(f"mask bitmap must be a non-empty 2-D array, got shape {bitmap.shape}")
    if not bitmap.any():
        raise ContractError("mask bitmap has no set pixels")
    mh, mw = bitmap.shape
    if (mh, mw) == (H, W):
        rows, cols = np.nonzero(bitmap)
        return frozenset(zip(rows.tolist(), cols.tolist())), False
    # Sample the bitmap at each grid cell center.
    cy, cx = _cell_centers(H, W)
    ri = np.minimum((cy * mh).astype(int), mh - 1)
    ci = np.minimum((cx * mw).astype(int), mw - 1)
    sampled = bitmap[np.ix_(ri, ci)]
    rows, cols = np.nonzero(sampled)
    if rows.size:
        return frozenset(zip(rows.tolist(), cols.tolist())), False
    pr, pc = np.nonzero(bitmap)
    cell = _nearest_cell((pc.mean() + 0.5) / mw, (pr.mean() + 0.5) / mh, H, W)
    return frozenset([cell]), True


def rasterize(shape: Union[Box, np.ndarray], H: int, W: int) -> LayoutRegion:
    """Cells whose centers fall inside ``shape`` (a Box or a boolean bitmap).

    Shapes covering no cell center snap to the cell nearest their centroid
    and the region is flagged ``degenerate``.
    """
    if H < 1 or W < 1:
        raise DimensionError(f"grid must be at least 1x1, got ({H}, {W})")
    if isinstance(shape, Box):
        cy, cx = _cell_centers(H, W)
        rows = np.flatnonzero((cy >= shape.y0) & (cy < shape.y1))
        cols = np.flatnonzero((cx >= shape.x0) & (cx < shape.x1))
        cells = frozenset((int(r), int(c)) for r in rows for c in cols)
        degenerate = not cells
        if degenerate:
            cells = frozenset([_nearest_cell(*shape.center, H, W)])
            logger.warning(f"box {shape.as_tuple()} covers no cell center on {H}x{W}; snapped to {next(iter(cells))}")
        return LayoutRegion("box", (H, W), cells, degenerate=degenerate)
    cells, degenerate = _bitmap_cells(shape, H, W)
    if degenerate:
        logger.warning(f"mask covers no cell center on {H}x{W}; snapped to {next(iter(cells))}")
    return LayoutRegion("mask", (H, W), cells, degenerate=degenerate)


def union_region(rs: LayoutRegion, ro: LayoutRegion) -> LayoutRegion:
    if rs.grid != ro.grid:
        raise DimensionError(f"cannot union regions on grids {rs.grid} and {ro.grid}")
    return LayoutRegion("mask", rs.grid, rs.cells | ro.cells)


def intersection_box(a: Box, b: Box) -> Optional[Box]:
    x0, y0 = max(a.x0, b.x0), max(a.y0, b.y0)
    x1, y1 = min(a.x1, b.x1), min(a.y1, b.y1)
    if x1 > x0 and y1 > y0:
        return Box(x0, y0, x1, y1)
    return None


def spanning_box(a: Box, b: Box) -> Box:
    return Box(min(a.x0, b.x0), min(a.y0, b.y0), max(a.x1, b.x1), max(a.y1, b.y1))


def between_region(bs: Box, bo: Box, H: int, W: int) -> LayoutRegion:
    """Overlap of the two boxes, or the rectangle spanning both when they are disjoint."""
    inter = intersection_box(bs, bo)
    return rasterize(inter if inter is not None else spanning_box(bs, bo), H, W)


def iou(a: Box, b: Box) -> float:
    inter = intersection_box(a, b)
    if inter is None:
        return 0.0
    union = a.area + b.area - inter.area
    return float(inter.area / union) if union > 0 else 0.0


def fourier_box_embedding(b: Box) -> np.ndarray:
    coords = np.array(b.as_tuple(), dtype=np.float64)
    freqs = 2.0 ** np.arange(FOURIER_FREQUENCIES)
    angles = 2.0 * np.pi * coords[:, None] * freqs[None, :]
    return np.stack([np.sin(angles), np.cos(angles)], axis=-1).reshape(BOX_EMBED_DIM)


def min_enclosing_box(region: LayoutRegion) -> Box:
    if not region.cells:
        raise ContractError("min_enclosing_box of an empty region")
    return _enclosing(region.cells, region.grid)
