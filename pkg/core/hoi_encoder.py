"""HOI token encoder: role, instance and box cues injected through a gated residual."""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from core import autodiff as ad
from core.autodiff import Tensor
from core.errors import ContractError, DimensionError
from core.geometry import BOX_EMBED_DIM, Box, LayoutRegion, fourier_box_embedding, union_region

logger = logging.getLogger(__name__)

ROLE_EMBED_DIM = 64
INSTANCE_EMBED_DIM = 64

# Role order in the token sequence is subject, action, object; embedding rows follow ROLES.
ROLES = ("subject", "object", "action")
ROLE_INDEX = {role: i for i, role in enumerate(ROLES)}
SEQUENCE_ORDER = ("subject", "action", "object")


@dataclass
class HoiInstance:
    """One interaction instance: per-role token sequences plus optional layout.

    Object-only entities carry only ``object_tokens``. ``validity`` marks real
    (True) versus padding (False) tokens once sequences have been budgeted.
    """

    n: int
    object_tokens: Tensor
    subject_tokens: Optional[Tensor] = None
    action_tokens: Optional[Tensor] = None
    regions: Optional[Dict[str, LayoutRegion]] = None
    boxes: Optional[Dict[str, Box]] = None
    validity: Dict[str, np.ndarray] = field(default_factory=dict)
    action_operator: str = "union"

    def __post_init__(self):
        if self.n < 0:
            raise ContractError(f"instance index must be non-negative, got {self.n}")
        for role in self.roles():
            if self.tokens(role).shape[0] == 0:
                raise ContractError(f"instance {self.n}: empty {role} token sequence")
        if self.regions and self.action_operator == "union" and "action" in self.regions:
            expected = union_region(self.regions["subject"], self.regions["object"])
            if self.regions["action"].cells != expected.cells:
                raise ContractError(f"instance {self.n}: action region is not the subject/object union")

    def roles(self) -> List[str]:
        return [r for r in SEQUENCE_ORDER if self.tokens(r) is not None]

    def tokens(self, role: str) -> Optional[Tensor]:
        return getattr(self, f"{role}_tokens")

    @property
    def object_only(self) -> bool:
        return self.subject_tokens is None and self.action_tokens is None

    @property
    def has_layout(self) -> bool:
        return bool(self.regions)

    def with_tokens(self, tokens: Dict[str, Tensor], validity: Optional[Dict[str, np.ndarray]] = None) -> "HoiInstance":
        updates = {f"{role}_tokens": t for role, t in tokens.items()}
        if validity is not None:
            updates["validity"] = validity
        return replace(self, **updates)


@dataclass
class EncoderParams:
    role_embeddings: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    gate: Tensor
    null_box: Tensor

    @property
    def d_text(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def init(cls, d_text: int, rng: np.random.Generator, hidden: Optional[int] = None,
             init_std: float = 0.02) -> "EncoderParams":
        """Gate starts at 0 so the encoder is the identity until trained."""
        hidden = hidden or 2 * d_text
        d_in = d_text + BOX_EMBED_DIM + ROLE_EMBED_DIM + INSTANCE_EMBED_DIM

        def normal(*shape):
            return Tensor(rng.normal(0.0, init_std, size=shape), requires_grad=True)

        return cls(
            role_embeddings=normal(len(ROLES), ROLE_EMBED_DIM),
            ln_gain=Tensor(np.ones(d_text), requires_grad=True),
            ln_bias=Tensor(np.zeros(d_text), requires_grad=True),
            w1=normal(d_in, hidden),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=normal(hidden, d_text),
            b2=Tensor(np.zeros(d_text), requires_grad=True),
            gate=Tensor(np.zeros(()), requires_grad=True),
            null_box=normal(BOX_EMBED_DIM),
        )

    def named_parameters(self) -> Dict[str, Tensor]:
        return {
            "role_embeddings": self.role_embeddings,
            "ln_gain": self.ln_gain,
            "ln_bias": self.ln_bias,
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
            "gate": self.gate,
            "null_box": self.null_box,
        }


def instance_embedding(n: int, dim: int = INSTANCE_EMBED_DIM) -> np.ndarray:
    """Interleaved sin/cos code of the instance index."""
    if n < 0:
        raise ContractError(f"instance index must be non-negative, got {n}")
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(n * freqs)
    out[1::2] = np.cos(n * freqs)
    return out


def _role_box(inst: HoiInstance, role: str) -> Optional[Box]:
    if inst.boxes and role in inst.boxes:
        return inst.boxes[role]
    if inst.regions and role in inst.regions:
        return inst.regions[role].enclosing_box
    return None


def side_signal(inst: HoiInstance, role: str, params: EncoderParams, length: int) -> Tensor:
    """[e_box; e_role; e_inst] broadcast over ``length`` tokens."""
    box = _role_box(inst, role)
    e_box = Tensor(fourier_box_embedding(box)) if box is not None else params.null_box
    e_role = params.role_embeddings[ROLE_INDEX[role]]
    e_inst = Tensor(instance_embedding(inst.n))
    side = ad.concat([e_box, e_role, e_inst], axis=0)
    return ad.broadcast_to(side, (length, side.shape[0]))


def encoder_mlp(params: EncoderParams, x: Tensor) -> Tensor:
    return ad.linear(ad.gelu(ad.linear(x, params.w1, params.b1)), params.w2, params.b2)


def encode_hoi_tokens(inst: HoiInstance, params: EncoderParams) -> HoiInstance:
    """h' = h + tanh(gate) * MLP([LN(h); e_box; e_role; e_inst]) for every role token."""
    gate = ad.tanh(params.gate)
    encoded = {}
    for role in inst.roles():
        h = inst.tokens(role)
        if h.ndim != 2 or h.shape[1] != params.d_text:
            raise DimensionError(
                f"instance {inst.n} {role} tokens have shape {h.shape}, encoder expects (L, {params.d_text})"
            )
        normed = ad.layer_norm(h, params.ln_gain, params.ln_bias)
        x = ad.concat([normed, side_signal(inst, role, params, h.shape[0])], axis=1)
        encoded[role] = h + gate * encoder_mlp(params, x)
    return inst.with_tokens(encoded)


def budget_lengths(M: int, K_hoi: int, L_max: int) -> int:
    """Per-sequence length L = min(L_max, K_hoi // M) for M active role sequences."""
    if M < 1:
        raise ContractError(f"budget needs at least one active role sequence, got M={M}")
    if K_hoi < M:
        raise ContractError(f"HOI token budget {K_hoi} is smaller than the {M} active sequences")
    return min(L_max, K_hoi // M)


def pad_or_truncate(seq: Tensor, L: int) -> Tuple[Tensor, np.ndarray]:
    """Keep the first L tokens, or append zero tokens flagged invalid."""
    if L < 1:
        raise ContractError(f"sequence length must be at least 1, got {L}")
    n = seq.shape[0]
    valid = np.zeros(L, dtype=bool)
    valid[:min(n, L)] = True
    if n >= L:
        return (seq if n == L else seq[:L]), valid
    pad = Tensor(np.zeros((L - n,) + seq.shape[1:]))
    return ad.concat([seq, pad], axis=0), valid


def budget_instances(instances: List[HoiInstance], K_hoi: int, L_max: int) -> Tuple[List[HoiInstance], int]:
    """Pad or truncate every role sequence to the shared budget length."""
    M = sum(len(inst.roles()) for inst in instances)
    if M == 0:
        return [], 0
    L = budget_lengths(M, K_hoi, L_max)
    out = []
    for inst in instances:
        tokens, validity = {}, {}
        for role in inst.roles():
            tokens[role], validity[role] = pad_or_truncate(inst.tokens(role), L)
        out.append(inst.with_tokens(tokens, validity))
    logger.debug(f"budgeted {M} role sequences to length {L}")
    return out, L
