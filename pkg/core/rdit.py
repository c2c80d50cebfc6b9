"""Toy relational diffusion transformer and its flow-matching objective.

One sequence carries prompt, HOI, noise-image and (for editing) source-image
tokens through single-stream blocks with adaLN-Zero timestep modulation.
Every block uses the same assembled attention mask and RoPE tables.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from core import autodiff as ad
from core.attention_mask import IMAGE_NOISE, AttentionMask, TokenLayout, assemble_final_mask
from core.autodiff import Tensor
from core.conditioning import Conditioning, DropFlags, HoiSpec
from core.errors import ConfigError, ContractError, DimensionError, NumericError
from core.geometry import Box, LayoutRegion, between_region, rasterize, union_region
from core.hoi_encoder import EncoderParams, HoiInstance, budget_instances, encode_hoi_tokens
from core.rope import apply_rope, layout_rope_indices, rope_tables
from core.scene_world import LatentImage

logger = logging.getLogger(__name__)

# Full-scale HOI budget; toy runs take theirs from ModelConfig.
FULL_K_HOI = 4608
FULL_L_MAX = 512

ACTION_OPERATORS = ("union", "between")


@dataclass
class ModelConfig:
    d_model: int = 96
    n_heads: int = 4
    n_layers: int = 4
    d_text: int = 64
    grid: Tuple[int, int] = (16, 16)
    channels: int = 4
    k_hoi: int = 256
    l_max: int = 4
    theta_base: float = 10000.0
    prompt_len: int = 12
    mlp_ratio: int = 4
    encoder_hidden: Optional[int] = None
    init_std: float = 0.02
    use_action_grounding: bool = True
    use_hoi_encoder: bool = True
    use_structured_attention: bool = True
    use_hoi_rope: bool = True
    action_region: str = "union"

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f"model.d_model ({self.d_model}) must be divisible by model.n_heads ({self.n_heads})")
        if self.head_dim % 6:
            raise ConfigError(f"model head dim {self.head_dim} must be divisible by 6 for 3-axis RoPE")
        if self.n_layers < 1 or self.d_text < 1 or self.channels < 1 or self.mlp_ratio < 1:
            raise ConfigError("model.n_layers, d_text, channels and mlp_ratio must be positive")
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ConfigError(f"model.grid must be two positive ints, got {self.grid}")
        if self.l_max < 1 or self.k_hoi < 1:
            raise ConfigError("model.k_hoi and model.l_max must be positive")
        if self.prompt_len < 0:
            raise ConfigError("model.prompt_len must be non-negative")
        if self.action_region not in ACTION_OPERATORS:
            raise ConfigError(f"model.action_region must be one of {ACTION_OPERATORS}, got {self.action_region!r}")


class RDiT:
    """Parameters of the denoiser in a flat, name-ordered table."""

    def __init__(self, config: ModelConfig, vocab_size: int, rng: Optional[np.random.Generator] = None):
        config.validate()
        self.config = config
        self.vocab_size = vocab_size
        rng = rng if rng is not None else np.random.default_rng(0)
        d, dt, C = config.d_model, config.d_text, config.channels
        self.params: Dict[str, Tensor] = {}

        self._add("tok_emb", rng.normal(0.0, 1.0, size=(vocab_size, dt)))
        self.encoder = EncoderParams.init(dt, rng, hidden=config.encoder_hidden, init_std=config.init_std)
        for name, p in self.encoder.named_parameters().items():
            p.name = f"encoder.{name}"
            self.params[p.name] = p
        self._linear("prompt_proj", dt, d, rng)
        self._linear("hoi_proj", dt, d, rng)
        self._linear("img_in", C, d, rng)
        self._linear("t_mlp.0", d, d, rng)
        self._linear("t_mlp.1", d, d, rng)
        hidden = config.mlp_ratio * d
        for i in range(config.n_layers):
            self._linear(f"blocks.{i}.mod", d, 6 * d, rng, zero=True)
            self._linear(f"blocks.{i}.qkv", d, 3 * d, rng)
            self._linear(f"blocks.{i}.out", d, d, rng)
            self._linear(f"blocks.{i}.mlp.0", d, hidden, rng)
            self._linear(f"blocks.{i}.mlp.1", hidden, d, rng)
        self._linear("final.mod", d, 2 * d, rng, zero=True)
        self._linear("final.out", d, C, rng, zero=True)
        self._ln_gain = np.ones(d)
        self._ln_bias = np.zeros(d)

    def _add(self, name: str, value: np.ndarray):
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _linear(self, name: str, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out))
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(d_out))

    def named_parameters(self) -> Dict[str, Tensor]:
        return self.params

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        unexpected = set(state) - set(self.params)
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}")
        for name, p in self.params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {value.shape}, model expects {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def linear(self, name: str, x) -> Tensor:
        return ad.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def forward(self, noisy, t: float, cond: Conditioning, source=None,
                cfg_drop: Optional[DropFlags] = None) -> Tensor:
        return rdit_forward(self, noisy, t, cond, source=source, cfg_drop=cfg_drop)


# ---------------------------------------------------------------- conditioning → HOI instances

def _role_regions(spec: HoiSpec, roles: List[str], config: ModelConfig) -> Tuple[Dict[str, LayoutRegion], Dict[str, Box]]:
    H, W = config.grid
    regions, boxes = {}, {}
    for role in ("subject", "object"):
        if role not in roles:
            continue
        if spec.masks and role in spec.masks:
            regions[role] = rasterize(spec.masks[role], H, W)
            boxes[role] = regions[role].enclosing_box
        elif spec.boxes and role in spec.boxes:
            regions[role] = rasterize(spec.boxes[role], H, W)
            boxes[role] = spec.boxes[role]
        else:
            raise ContractError(f"instance {spec.n} has layout but no {role} box or mask")
    if "action" in roles:
        if config.action_region == "union":
            regions["action"] = union_region(regions["subject"], regions["object"])
        else:
            regions["action"] = between_region(boxes["subject"], boxes["object"], H, W)
        boxes["action"] = regions["action"].enclosing_box
    return regions, boxes


def build_instances(model: RDiT, cond: Conditioning) -> List[HoiInstance]:
    """Embed token ids and rasterize layout for every HOI, ordered by instance index."""
    config = model.config
    emb = model.params["tok_emb"]
    instances = []
    for spec in sorted(cond.hois, key=lambda h: h.n):
        tokens = {"object": ad.embedding(emb, spec.object_ids)}
        if spec.subject_ids is not None:
            tokens["subject"] = ad.embedding(emb, spec.subject_ids)
        if spec.action_ids is not None and spec.subject_ids is not None and config.use_action_grounding:
            tokens["action"] = ad.embedding(emb, spec.action_ids)
        regions = boxes = None
        if spec.has_layout:
            regions, boxes = _role_regions(spec, list(tokens), config)
        instances.append(HoiInstance(
            n=spec.n,
            object_tokens=tokens["object"],
            subject_tokens=tokens.get("subject"),
            action_tokens=tokens.get("action"),
            regions=regions,
            boxes=boxes,
            action_operator=config.action_region,
        ))
    return instances


@dataclass
class PreparedSequence:
    layout: TokenLayout
    mask: AttentionMask
    rope_cos: np.ndarray
    rope_sin: np.ndarray
    instances: List[HoiInstance] = field(default_factory=list)


def prepare_sequence(model: RDiT, cond: Conditioning, with_source: bool) -> PreparedSequence:
    """HOI tokens (encoded, budgeted), token layout, mask and RoPE tables for one conditioning."""
    config = model.config
    instances = build_instances(model, cond)
    if config.use_hoi_encoder:
        instances = [encode_hoi_tokens(inst, model.encoder) for inst in instances]
    instances, _ = budget_instances(instances, config.k_hoi, config.l_max)
    prompt_len = min(len(cond.prompt_ids), config.prompt_len)
    layout = TokenLayout.build(prompt_len, instances, config.grid, with_source=with_source)
    mask = assemble_final_mask(layout, instances, structured=config.use_structured_attention)
    cos, sin = rope_tables(layout_rope_indices(layout, config.use_hoi_rope), config.head_dim, config.theta_base)
    return PreparedSequence(layout, mask, cos, sin, instances)


# ---------------------------------------------------------------- network

def timestep_embedding(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * float(t) * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)])
    return np.pad(emb, (0, dim - emb.shape[0]))


def _modulate(model: RDiT, x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    normed = ad.layer_norm(x, Tensor(model._ln_gain), Tensor(model._ln_bias))
    return normed * (1.0 + scale) + shift


def _attention(model: RDiT, i: int, h: Tensor, prepared: PreparedSequence) -> Tensor:
    config = model.config
    N, d = h.shape
    nh, hd = config.n_heads, config.head_dim
    qkv = model.linear(f"blocks.{i}.qkv", h).reshape(N, 3, nh, hd).transpose(1, 2, 0, 3)
    tables = (prepared.rope_cos, prepared.rope_sin)
    q = apply_rope(qkv[0], tables=tables)
    k = apply_rope(qkv[1], tables=tables)
    out = ad.masked_attention(q, k, qkv[2], prepared.mask, hd)
    return model.linear(f"blocks.{i}.out", out.transpose(1, 0, 2).reshape(N, d))


def _block(model: RDiT, i: int, x: Tensor, c: Tensor, prepared: PreparedSequence) -> Tensor:
    d = model.config.d_model
    mod = model.linear(f"blocks.{i}.mod", ad.gelu(c))
    shift1, scale1, gate1 = mod[:, 0:d], mod[:, d:2 * d], mod[:, 2 * d:3 * d]
    shift2, scale2, gate2 = mod[:, 3 * d:4 * d], mod[:, 4 * d:5 * d], mod[:, 5 * d:6 * d]
    x = x + gate1 * _attention(model, i, _modulate(model, x, shift1, scale1), prepared)
    h = model.linear(f"blocks.{i}.mlp.0", _modulate(model, x, shift2, scale2))
    return x + gate2 * model.linear(f"blocks.{i}.mlp.1", ad.gelu(h))


def _latent_array(latent, grid: Tuple[int, int], channels: int, what: str) -> np.ndarray:
    values = latent.values if isinstance(latent, LatentImage) else np.asarray(latent)
    if values.shape != (grid[0], grid[1], channels):
        raise DimensionError(f"{what} latent has shape {values.shape}, model expects {(grid[0], grid[1], channels)}")
    return values


def rdit_forward(model: RDiT, noisy, t: float, cond: Conditioning, source=None,
                 cfg_drop: Optional[DropFlags] = None) -> Tensor:
    """Predicted velocity (H, W, C) for the noise segment."""
    config = model.config
    H, W = config.grid
    C = config.channels
    if cfg_drop is not None:
        cond = cfg_drop.apply(cond)
    x_noisy = _latent_array(noisy, config.grid, C, "noisy")
    x_source = _latent_array(source, config.grid, C, "source") if source is not None else None

    prepared = prepare_sequence(model, cond, with_source=x_source is not None)
    layout = prepared.layout
    if prepared.mask.shape != (layout.total, layout.total) or prepared.rope_cos.shape[0] != layout.total:
        raise ContractError("attention mask or RoPE table does not match the token layout")

    pieces = []
    prompt_len = layout.segment("prompt").length if layout.segment("prompt") else 0
    if prompt_len:
        prompt = ad.embedding(model.params["tok_emb"], cond.prompt_ids[:prompt_len])
        pieces.append(model.linear("prompt_proj", prompt))
    for inst in prepared.instances:
        for role in inst.roles():
            pieces.append(model.linear("hoi_proj", inst.tokens(role)))
    pieces.append(model.linear("img_in", Tensor(x_noisy.reshape(H * W, C))))
    if x_source is not None:
        pieces.append(model.linear("img_in", Tensor(x_source.reshape(H * W, C))))
    x = ad.concat(pieces, axis=0)

    c = model.linear("t_mlp.1", ad.gelu(model.linear("t_mlp.0", Tensor(timestep_embedding(t, config.d_model)[None, :]))))
    for i in range(config.n_layers):
        x = _block(model, i, x, c, prepared)

    seg = layout.segment(IMAGE_NOISE)
    d = config.d_model
    mod = model.linear("final.mod", ad.gelu(c))
    img = _modulate(model, x[seg.start:seg.stop], mod[:, 0:d], mod[:, d:2 * d])
    return model.linear("final.out", img).reshape(H, W, C)


# ---------------------------------------------------------------- flow matching

def interpolate(x0, x1, t: float) -> np.ndarray:
    """Point on the straight path from data (t=0) to noise (t=1)."""
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise DimensionError(f"interpolate endpoints differ in shape: {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t must lie in [0, 1], got {t}")
    return (1.0 - t) * x0 + t * x1


def flow_match_loss(model, x0, cond: Conditioning, rng: np.random.Generator, source=None,
                    noise: Optional[np.ndarray] = None, t: Optional[float] = None) -> Tensor:
    """MSE between predicted velocity and x1 - x0 at a uniformly drawn t.

    ``model`` is anything with ``forward(noisy, t, cond, source)``.
    """
    x0 = x0.values if isinstance(x0, LatentImage) else np.asarray(x0)
    x1 = noise if noise is not None else rng.standard_normal(x0.shape)
    t = float(rng.uniform(0.0, 1.0)) if t is None else float(t)
    x_t = interpolate(x0, x1, t)
    velocity = model.forward(x_t, t, cond, source)
    loss = ad.mse_loss(velocity, Tensor(x1 - x0))
    if not np.isfinite(loss.data):
        raise NumericError(f"flow-matching loss is not finite at t={t:.4f}")
    return loss
