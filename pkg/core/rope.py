"""Three-axis rotary position encoding (stream, row, col).

The head dimension is split into three equal bands, one per axis; within a
band, consecutive channel pairs (2p, 2p+1) rotate by pos * theta^(-j/band_pairs).
"""

import logging
from typing import List, NamedTuple, Tuple

import numpy as np

from core import autodiff as ad
from core.attention_mask import HOI, IMAGE_NOISE, IMAGE_SOURCE, PROMPT, TokenLayout
from core.autodiff import Tensor
from core.errors import ConfigError

logger = logging.getLogger(__name__)

NOISE_STREAM = "noise"
SOURCE_STREAM = "source"


class RopeIndex(NamedTuple):
    a: int
    x: int
    y: int


PROMPT_INDEX = RopeIndex(0, 0, 0)


def image_rope_indices(H: int, W: int, stream: str = NOISE_STREAM) -> List[RopeIndex]:
    """(stream id, row, col) per cell in row-major order; noise is stream 0, source stream 1."""
    if stream not in (NOISE_STREAM, SOURCE_STREAM):
        raise ConfigError(f"unknown image stream {stream!r}")
    a = 0 if stream == NOISE_STREAM else 1
    return [RopeIndex(a, r, c) for r in range(H) for c in range(W)]


def hoi_rope_index(n: int, H: int, W: int) -> RopeIndex:
    """Off-grid slot (0, T+n, T+n), T = max(H, W), shared by every token of instance n."""
    T = max(H, W)
    return RopeIndex(0, T + n, T + n)


def layout_rope_indices(layout: TokenLayout, use_hoi_rope: bool = True) -> np.ndarray:
    """(num_tokens, 3) integer index table for a token layout."""
    H, W = layout.grid
    out = np.zeros((layout.total, 3), dtype=np.int64)
    for seg in layout.segments:
        sl = slice(seg.start, seg.stop)
        if seg.kind == PROMPT:
            out[sl] = PROMPT_INDEX
        elif seg.kind == HOI:
            out[sl] = hoi_rope_index(seg.instance, H, W) if use_hoi_rope else PROMPT_INDEX
        elif seg.kind == IMAGE_NOISE:
            out[sl] = image_rope_indices(H, W, NOISE_STREAM)
        elif seg.kind == IMAGE_SOURCE:
            out[sl] = image_rope_indices(H, W, SOURCE_STREAM)
    return out


def _check_head_dim(head_dim: int) -> int:
    if head_dim <= 0 or head_dim % 6 != 0:
        raise ConfigError(f"head_dim must be a positive multiple of 6 for 3-axis RoPE, got {head_dim}")
    return head_dim // 6


def rope_tables(indices, head_dim: int, theta_base: float = 10000.0) -> Tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (num_tokens, head_dim // 2)."""
    pairs_per_axis = _check_head_dim(head_dim)
    pos = np.asarray(indices, dtype=np.float64).reshape(-1, 3)
    freqs = theta_base ** (-np.arange(pairs_per_axis) / pairs_per_axis)
    angles = np.concatenate([pos[:, axis:axis + 1] * freqs[None, :] for axis in range(3)], axis=1)
    return np.cos(angles), np.sin(angles)


def apply_rope(qk, indices=None, theta_base: float = 10000.0, tables=None) -> Tensor:
    """Rotate the last axis of ``qk`` (..., num_tokens, head_dim) by per-token angles.

    Pass either ``indices`` or precomputed ``tables`` from ``rope_tables``.
    """
    qk = ad.as_tensor(qk)
    head_dim = qk.shape[-1]
    _check_head_dim(head_dim)
    cos, sin = tables if tables is not None else rope_tables(indices, head_dim, theta_base)
    if cos.shape != (qk.shape[-2], head_dim // 2):
        raise ConfigError(f"rope tables {cos.shape} do not fit tokens of shape {qk.shape}")
    cos = cos.astype(qk.dtype, copy=False)
    sin = sin.astype(qk.dtype, copy=False)

    x = qk.data
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return ad.make_op(out, (qk,), "rope", backward)
