"""Greymap/pixmap and CSV dumps for inspecting masks and latents."""

import logging
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from core.attention_mask import AttentionMask
from core.errors import SceneParseError
from core.scene_world import LatentImage

logger = logging.getLogger(__name__)

ALLOWED_GREY = 255


def mask_to_pgm(mask: Union[AttentionMask, np.ndarray]) -> bytes:
    """Binary PGM (P5): allowed pairs white, blocked pairs black; row = query."""
    allowed = mask.allowed if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)
    n_rows, n_cols = allowed.shape
    pixels = np.where(allowed, ALLOWED_GREY, 0).astype(np.uint8)
    return f"P5\n{n_cols} {n_rows}\n255\n".encode("ascii") + pixels.tobytes()


def pgm_to_allowed(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise SceneParseError("expected an 8-bit binary PGM (P5, maxval 255)", field="header")
    _, size, _, rest = parts
    try:
        width, height = (int(v) for v in size.split())
    except ValueError:
        raise SceneParseError(f"bad PGM size {size.decode('ascii', 'replace')!r}", field="size", line=2) from None
    if width <= 0 or height <= 0:
        raise SceneParseError(f"PGM size must be positive, got {width}x{height}", field="size", line=2)
    if len(rest) < width * height:
        raise SceneParseError(f"PGM pixel data is truncated: {len(rest)} of {width * height} bytes",
                              field="pixels")
    return np.frombuffer(rest, dtype=np.uint8, count=width * height).reshape(height, width) == ALLOWED_GREY


def blocked_pairs(mask: AttentionMask) -> pd.DataFrame:
    """One row per blocked (query, key) pair, labelled with token kind, role and instance."""
    labels = mask.layout.token_labels()
    q, k = np.nonzero(~mask.allowed)
    frame = pd.DataFrame({"query": q, "key": k})
    for name in ("kind", "role", "instance"):
        frame[f"query_{name}"] = labels[name][q]
        frame[f"key_{name}"] = labels[name][k]
    return frame


def latent_to_ppm(latent: LatentImage, scale: int = 8) -> bytes:
    """Binary PPM (P6) of channels 0-2 mapped from [-1, 1] to [0, 255], upscaled by ``scale``."""
    values = latent.values[..., :3]
    if values.shape[-1] < 3:
        values = np.concatenate([values, np.zeros((*values.shape[:2], 3 - values.shape[-1]))], axis=-1)
    rgb = np.clip((values + 1.0) * 127.5, 0, 255).astype(np.uint8)
    rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    height, width = rgb.shape[:2]
    return f"P6\n{width} {height}\n255\n".encode("ascii") + rgb.tobytes()


def write_mask_dump(mask: AttentionMask, out_dir: Path, stem: str = "mask") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pgm = out_dir / f"{stem}.pgm"
    pgm.write_bytes(mask_to_pgm(mask))
    blocked_pairs(mask).to_csv(out_dir / f"{stem}_blocked.csv", index=False)
    logger.info(f"mask {mask.shape[0]}x{mask.shape[1]} written to {pgm}")
    return pgm
