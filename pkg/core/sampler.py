"""Euler sampling of the learned velocity field with classifier-free guidance."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from tqdm import tqdm

from core.autodiff import no_grad
from core.conditioning import Conditioning
from core.errors import ConfigError, DimensionError
from core.scene_world import LatentImage

logger = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    steps: int = 28
    cfg_scale: float = 3.5
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise ConfigError(f"sampler.steps must be at least 1, got {self.steps}")
        if not np.isfinite(self.cfg_scale):
            raise ConfigError(f"sampler.cfg_scale must be finite, got {self.cfg_scale}")


def guided_velocity(v_cond: np.ndarray, v_uncond: np.ndarray, scale: float) -> np.ndarray:
    """v_u + s (v_c - v_u); returns v_cond itself at s = 1."""
    if scale == 1.0:
        return v_cond
    return v_uncond + scale * (v_cond - v_uncond)


def _velocity(model, x: np.ndarray, t: float, cond: Conditioning, source: Optional[np.ndarray],
              scale: float) -> np.ndarray:
    v_cond = model.forward(x, t, cond, source).data
    if scale == 1.0:
        return v_cond
    v_uncond = model.forward(x, t, Conditioning.null(), source).data
    return guided_velocity(v_cond, v_uncond, scale)


def _integrate(model, cond: Conditioning, config: SamplerConfig, source: Optional[np.ndarray]) -> LatentImage:
    config.validate()
    H, W = model.config.grid
    rng = np.random.default_rng(config.seed)
    x = rng.standard_normal((H, W, model.config.channels))
    dt = 1.0 / config.steps
    with no_grad():
        for i in tqdm(range(config.steps), desc="sample", leave=False, disable=None):
            t = 1.0 - i * dt
            x = x - dt * _velocity(model, x, t, cond, source, config.cfg_scale)
    return LatentImage(x)


def euler_sample(model, cond: Conditioning, config: SamplerConfig = SamplerConfig()) -> LatentImage:
    """Integrate from noise at t=1 to t=0 in ``config.steps`` uniform steps."""
    return _integrate(model, cond, config, None)


def edit_sample(model, source: LatentImage, cond: Conditioning, config: SamplerConfig = SamplerConfig()) -> LatentImage:
    """Sample with ``source`` present as a read-only second image stream."""
    values = source.values if isinstance(source, LatentImage) else np.asarray(source)
    expected = (*model.config.grid, model.config.channels)
    if values.shape != expected:
        raise DimensionError(f"source latent has shape {values.shape}, model expects {expected}")
    frozen = values.copy()
    frozen.setflags(write=False)
    return _integrate(model, cond, config, frozen)
